//! The three critic arrangements behind one interface: attention over the
//! active agents, fully connected over absorbing slots, and a per-agent
//! value function for independent learners.

use rand::Rng;

use crate::attention::Entity;
use crate::critic::{
    clipped_regression_loss, BaselineNet, BaselineQuery, CriticConfig, CriticError, FcBaselineNet,
    FcValueNet, SlotLayout, ValueNet,
};
use crate::scalar::Real;
use crate::spaces::AgentKind;
use crate::tensor::{Adam, Graph, NodeId, ParamStore};
use crate::trainer::rollout::{GroupStep, StateRecord};
use crate::trainer::TrainError;

/// Rows evaluated per graph when no gradients are needed.
const EVAL_CHUNK: usize = 1024;

/// What a value network sees.
#[derive(Debug, Clone, Copy)]
pub enum ValueInput<'a> {
    Group(&'a StateRecord),
    Agent(&'a [f64]),
}

/// A baseline query: agent `agent` of `step`, the rest with their actions.
pub type BaselineInput<'a> = (&'a GroupStep, usize);

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Model<F: Real> {
    Attention {
        value: ValueNet<F>,
        baseline: BaselineNet<F>,
    },
    Absorbing {
        layout: SlotLayout,
        value: FcValueNet<F>,
        baseline: FcBaselineNet<F>,
    },
    Independent {
        value: FcValueNet<F>,
    },
}

/// Critic networks with their own optimizers.
#[derive(Debug, Clone)]
pub struct Critic<F: Real> {
    model: Model<F>,
    value_opt: Adam<F>,
    baseline_opt: Option<Adam<F>>,
}

impl<F: Real> Critic<F> {
    pub fn attention<R: Rng + ?Sized>(
        kinds: &[AgentKind],
        cfg: CriticConfig,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        let value = ValueNet::new(kinds, cfg, rng)?;
        let baseline = BaselineNet::new(kinds, cfg, rng)?;
        Ok(Critic {
            value_opt: Adam::new(value.store(), F::from_f(lr)),
            baseline_opt: Some(Adam::new(baseline.store(), F::from_f(lr))),
            model: Model::Attention { value, baseline },
        })
    }

    pub fn absorbing<R: Rng + ?Sized>(
        layout: SlotLayout,
        hidden: usize,
        layers: usize,
        lr: f64,
        rng: &mut R,
    ) -> Self {
        let value = FcValueNet::new(layout, hidden, layers, rng);
        let baseline = FcBaselineNet::new(layout, hidden, layers, rng);
        Critic {
            value_opt: Adam::new(value.store(), F::from_f(lr)),
            baseline_opt: Some(Adam::new(baseline.store(), F::from_f(lr))),
            model: Model::Absorbing {
                layout,
                value,
                baseline,
            },
        }
    }

    /// Value of a single agent's observation.
    pub fn independent<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: usize,
        layers: usize,
        lr: f64,
        rng: &mut R,
    ) -> Self {
        let layout = SlotLayout {
            n_max: 1,
            obs_dim,
            n_actions: 0,
        };
        let value = FcValueNet::new(layout, hidden, layers, rng);
        Critic {
            value_opt: Adam::new(value.store(), F::from_f(lr)),
            baseline_opt: None,
            model: Model::Independent { value },
        }
    }

    pub fn has_baseline(&self) -> bool {
        self.baseline_opt.is_some()
    }

    pub fn stores(&self) -> Vec<&ParamStore<F>> {
        match &self.model {
            Model::Attention { value, baseline } => vec![value.store(), baseline.store()],
            Model::Absorbing { value, baseline, .. } => vec![value.store(), baseline.store()],
            Model::Independent { value } => vec![value.store()],
        }
    }

    fn value_forward(&self, g: &mut Graph<F>, inputs: &[ValueInput<'_>]) -> Result<NodeId, TrainError> {
        match &self.model {
            Model::Attention { value, .. } => {
                let states = inputs
                    .iter()
                    .map(|i| match i {
                        ValueInput::Group(s) => Ok(s
                            .agents
                            .iter()
                            .map(|a| Entity::observation(a.kind.observation.id, &a.obs))
                            .collect::<Vec<_>>()),
                        ValueInput::Agent(_) => Err(mismatch()),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(value.forward(g, &states)?)
            }
            Model::Absorbing { layout, value, .. } => {
                let rows = inputs
                    .iter()
                    .map(|i| match i {
                        ValueInput::Group(s) => {
                            let padded = s.padded.as_ref().ok_or_else(unpadded)?;
                            Ok(layout.value_row(&padded.slots)?)
                        }
                        ValueInput::Agent(_) => Err(mismatch()),
                    })
                    .collect::<Result<Vec<_>, TrainError>>()?;
                Ok(value.forward(g, &rows)?)
            }
            Model::Independent { value } => {
                let rows = inputs
                    .iter()
                    .map(|i| match i {
                        ValueInput::Agent(o) => Ok(o.to_vec()),
                        ValueInput::Group(_) => Err(mismatch()),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(value.forward(g, &rows)?)
            }
        }
    }

    fn baseline_forward(&self, g: &mut Graph<F>, inputs: &[BaselineInput<'_>]) -> Result<NodeId, TrainError> {
        match &self.model {
            Model::Attention { baseline, .. } => {
                let queries = inputs
                    .iter()
                    .map(|&(step, j)| {
                        let agents = &step.state.agents;
                        let focus = &agents[j];
                        let others: Vec<_> = agents
                            .iter()
                            .zip(&step.actions)
                            .enumerate()
                            .filter(|&(i, _)| i != j)
                            .map(|(_, (a, r))| {
                                let e = Entity::with_action(
                                    a.kind.observation.id,
                                    &a.obs,
                                    a.kind.action.id,
                                    r.action,
                                );
                                (a.id, e)
                            })
                            .collect();
                        BaselineQuery::new(
                            focus.id,
                            Entity::observation(focus.kind.observation.id, &focus.obs),
                            &others,
                        )
                    })
                    .collect::<Result<Vec<_>, CriticError>>()?;
                Ok(baseline.forward(g, &queries)?)
            }
            Model::Absorbing {
                layout, baseline, ..
            } => {
                let rows = inputs
                    .iter()
                    .map(|&(step, j)| {
                        let padded = step.state.padded.as_ref().ok_or_else(unpadded)?;
                        let actions: Vec<Option<usize>> = padded
                            .ids
                            .iter()
                            .zip(&padded.mask)
                            .map(|(id, &on)| {
                                let id = (*id).filter(|_| on)?;
                                step.state.position(id).map(|p| step.actions[p].action)
                            })
                            .collect();
                        let focus_id = step.state.agents[j].id;
                        let focus = padded
                            .ids
                            .iter()
                            .position(|s| *s == Some(focus_id))
                            .ok_or_else(unpadded)?;
                        Ok(layout.baseline_row(&padded.slots, &actions, focus)?)
                    })
                    .collect::<Result<Vec<_>, TrainError>>()?;
                Ok(baseline.forward(g, &rows)?)
            }
            Model::Independent { .. } => Err(TrainError::Protocol("independent critic has no baseline".into())),
        }
    }

    pub fn values(&self, inputs: &[ValueInput<'_>]) -> Result<Vec<f64>, TrainError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let node = self.value_forward(&mut g, chunk)?;
            out.extend(g.value(node).as_slice().iter().map(|v| v.to_f()));
        }
        Ok(out)
    }

    pub fn baselines(&self, inputs: &[BaselineInput<'_>]) -> Result<Vec<f64>, TrainError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let node = self.baseline_forward(&mut g, chunk)?;
            out.extend(g.value(node).as_slice().iter().map(|v| v.to_f()));
        }
        Ok(out)
    }

    /// One clipped regression step on each network; returns the losses.
    /// Empty inputs skip that network.
    pub fn update(
        &mut self,
        values: &[(ValueInput<'_>, f64, f64)],
        baselines: &[(BaselineInput<'_>, f64, f64)],
        epsilon: f64,
    ) -> Result<(f64, f64), TrainError> {
        let eps = F::from_f(epsilon);
        let mut value_loss = 0.0;
        if !values.is_empty() {
            let inputs: Vec<_> = values.iter().map(|v| v.0).collect();
            let targets: Vec<F> = values.iter().map(|v| F::from_f(v.1)).collect();
            let old: Vec<F> = values.iter().map(|v| F::from_f(v.2)).collect();
            let mut g = Graph::new();
            let pred = self.value_forward(&mut g, &inputs)?;
            let loss = clipped_regression_loss(&mut g, pred, &old, &targets, eps)?;
            g.backward(loss)?;
            value_loss = g.value(loss).as_slice()[0].to_f();
            let store = self.value_store_mut();
            store.zero_grads();
            g.accumulate_param_grads(store);
            let (model, opt) = (&mut self.model, &mut self.value_opt);
            opt.step(value_store(model));
        }
        let mut baseline_loss = 0.0;
        if !baselines.is_empty() && self.baseline_opt.is_some() {
            let inputs: Vec<_> = baselines.iter().map(|v| v.0).collect();
            let targets: Vec<F> = baselines.iter().map(|v| F::from_f(v.1)).collect();
            let old: Vec<F> = baselines.iter().map(|v| F::from_f(v.2)).collect();
            let mut g = Graph::new();
            let pred = self.baseline_forward(&mut g, &inputs)?;
            let loss = clipped_regression_loss(&mut g, pred, &old, &targets, eps)?;
            g.backward(loss)?;
            baseline_loss = g.value(loss).as_slice()[0].to_f();
            let store = baseline_store(&mut self.model).expect("baseline present");
            store.zero_grads();
            g.accumulate_param_grads(store);
            if let Some(opt) = self.baseline_opt.as_mut() {
                opt.step(baseline_store(&mut self.model).expect("baseline present"));
            }
        }
        Ok((value_loss, baseline_loss))
    }

    fn value_store_mut(&mut self) -> &mut ParamStore<F> {
        value_store(&mut self.model)
    }
}

fn value_store<F: Real>(model: &mut Model<F>) -> &mut ParamStore<F> {
    match model {
        Model::Attention { value, .. } => value.store_mut(),
        Model::Absorbing { value, .. } => value.store_mut(),
        Model::Independent { value } => value.store_mut(),
    }
}

fn baseline_store<F: Real>(model: &mut Model<F>) -> Option<&mut ParamStore<F>> {
    match model {
        Model::Attention { baseline, .. } => Some(baseline.store_mut()),
        Model::Absorbing { baseline, .. } => Some(baseline.store_mut()),
        Model::Independent { .. } => None,
    }
}

fn mismatch() -> TrainError {
    TrainError::Protocol("value input does not match the critic".into())
}

fn unpadded() -> TrainError {
    TrainError::Protocol("absorbing critic needs padded slot views".into())
}
