use std::collections::BTreeMap;

use mapoca_core::envs::{
    parse_action_script, BatonRelay, BatonRelayConfig, BatonRelayLayout, Cell, DungeonRun, DungeonRunConfig,
    DungeonRunLayout, GroupEnv, StepResult,
};
use mapoca_core::spaces::AgentId;

fn script(name: &str) -> Vec<Vec<usize>> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    parse_action_script(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Plays the script, pairing each tuple with the active agents in id order.
fn play<E: GroupEnv>(env: &mut E, steps: &[Vec<usize>]) -> Vec<StepResult> {
    steps
        .iter()
        .map(|tuple| {
            let active = env.active();
            assert_eq!(active.len(), tuple.len(), "tuple {tuple:?} for {} agents", active.len());
            let actions: BTreeMap<AgentId, usize> = active.iter().map(|h| h.id).zip(tuple.iter().copied()).collect();
            env.step(&actions).unwrap()
        })
        .collect()
}

#[test]
fn dungeon_run_sacrifice() {
    let mut env = DungeonRun::new(DungeonRunConfig {
        dragon_move_prob: 0.0,
        ..DungeonRunConfig::default()
    });
    let layout = DungeonRunLayout {
        agents: vec![Cell::new(1, 1), Cell::new(1, 2), Cell::new(5, 5)],
        dragon: Cell::new(2, 1),
        portal: Cell::new(6, 0),
        door: Cell::new(0, 3),
        pinks: vec![],
    };
    env.reset_with_layout(&layout, 0).unwrap();
    let steps = script("dungeon_run_sacrifice.txt");
    let results = play(&mut env, &steps);

    // touching the dragon removes both and leaves the key behind
    assert_eq!(results[0].terminations, vec![AgentId(0)]);
    assert_eq!(results[0].group_reward, 0.0);
    assert_eq!(env.dragon(), None);

    let last = results.last().unwrap();
    assert_eq!(results.len(), steps.len());
    assert!(last.episode_done && !last.interrupted);
    assert_eq!(last.group_reward, 1.0);
    assert_eq!(env.key_holder(), Some(AgentId(1)));
    assert_eq!(results.iter().map(|r| r.group_reward).sum::<f64>(), 1.0);
}

#[test]
fn baton_relay_only_newest_agent_interacts() {
    let mut env = BatonRelay::new(BatonRelayConfig::default());
    let layout = BatonRelayLayout {
        spawn: Cell::new(0, 0),
        button: Cell::new(0, 2),
        exit: Cell::new(5, 5),
        orb: Cell::new(2, 0),
    };
    env.reset_with_layout(layout, 3).unwrap();
    let steps = script("baton_relay_gating.txt");

    let first = play(&mut env, &steps[..6]);
    assert!(first[1].group_reward > 0.9);
    assert_eq!(first[5].spawns.len(), 1);
    assert_eq!(first[5].spawns[0].id, AgentId(1));
    let orb = env.orb().unwrap();
    assert_eq!(orb, Cell::new(1, 3));

    // agent 0 stands on the orb without collecting it
    let walk = play(&mut env, &steps[6..9]);
    assert!(walk.iter().all(|r| r.group_reward < 0.0));
    assert_eq!(env.orb(), Some(orb));
    assert_eq!(env.collected(), 1);

    let fetch = play(&mut env, &steps[9..]);
    assert!(fetch[3].group_reward > 0.9);
    assert_eq!(env.collected(), 2);
    let press = fetch.last().unwrap();
    assert_eq!(press.spawns.len(), 1);
    assert_eq!(press.spawns[0].id, AgentId(2));
    assert!(!press.episode_done);
}
