use std::sync::Arc;

use smallvec::{smallvec, SmallVec};

use super::world::{chebyshev, step_within, Action, Pos, Trajectory, ENEMY_MOVES};
use super::{EnemyRoomError, Result};
use crate::inference::InitialDistribution;
use crate::neural::{MlpSpec, NeuralContext, ParamStore, Tensor};
use crate::stochastics::RngKey;
use crate::symbolic::{
    Access, ChoiceDistribution, ClusterProgram, Factor, FiniteDist, FnRule, Model, ObservationModel, Schema,
    Scope, Value, VarId,
};

pub const POLICY_NET: &str = "policy";
pub const HIT_LOGIT: &str = "hit_logit";
pub const POLICY_FEATURES: usize = 6;

/// Policy input: enemy and agent coordinates and their offset, all divided
/// by the grid size.
pub fn policy_features(n: i64, enemy: Pos, agent: Pos) -> [f64; POLICY_FEATURES] {
    let s = 1.0 / n as f64;
    [
        enemy.0 as f64 * s,
        enemy.1 as f64 * s,
        agent.0 as f64 * s,
        agent.1 as f64 * s,
        (agent.0 - enemy.0) as f64 * s,
        (agent.1 - enemy.1) as f64 * s,
    ]
}

/// Fresh parameters: the enemy policy network and a zero hit logit.
pub fn init_params(key: RngKey) -> Result<ParamStore> {
    let mut store = ParamStore::init(&MlpSpec::policy(POLICY_FEATURES, ENEMY_MOVES.len()), POLICY_NET, key)?;
    store.insert(HIT_LOGIT, Tensor::scalar(0.0));
    Ok(store)
}

/// Variable ids of the enemy-room schema.
#[derive(Debug, Clone)]
pub struct RoomVars {
    pub ax: VarId,
    pub ay: VarId,
    pub ex: Vec<VarId>,
    pub ey: Vec<VarId>,
    pub hit: Vec<VarId>,
    pub hp: VarId,
}

/// Which decomposition of a shared hit observation the model declares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitCoupling {
    /// One factor for the union of per-enemy hits.
    Union,
    /// Every enemy is required to hit. Wrong for `E = 2`; kept to exercise
    /// the cluster validator.
    EachEnemy,
}

/// The NeSy model of the room for one grid size and enemy count.
pub struct EnemyRoom {
    pub n: i64,
    pub e: usize,
    pub initial_hp: i64,
    pub vars: RoomVars,
    pub model: Model,
}

struct PolicyDist {
    n: i64,
    ex: VarId,
    ey: VarId,
    ax: VarId,
    ay: VarId,
}

impl ChoiceDistribution for PolicyDist {
    fn distribution<'t>(
        &self,
        sc: &Scope<'_>,
        ctx: &dyn NeuralContext<'t>,
    ) -> crate::symbolic::Result<FiniteDist<'t>> {
        let enemy = (sc.prev(self.ex)?, sc.prev(self.ey)?);
        let agent = (sc.current(self.ax)?, sc.current(self.ay)?);
        let out = ctx.network(POLICY_NET, &policy_features(self.n, enemy, agent))?;
        FiniteDist::from_log_probs(&[0, 1, 2, 3, 4, 5, 6, 7], out)
    }
}

struct HitDist {
    hp: VarId,
    ex: VarId,
    ey: VarId,
    ax: VarId,
    ay: VarId,
}

impl ChoiceDistribution for HitDist {
    fn distribution<'t>(
        &self,
        sc: &Scope<'_>,
        ctx: &dyn NeuralContext<'t>,
    ) -> crate::symbolic::Result<FiniteDist<'t>> {
        let enemy = (sc.current(self.ex)?, sc.current(self.ey)?);
        let agent = (sc.current(self.ax)?, sc.current(self.ay)?);
        // a dead agent is never attacked again
        if sc.prev(self.hp)? > 0 && chebyshev(enemy, agent) == 1 {
            FiniteDist::bernoulli(ctx.parameter(HIT_LOGIT)?)
        } else {
            Ok(FiniteDist::point(0))
        }
    }
}

struct DamageDist {
    hit: VarId,
    die: Value,
}

impl ChoiceDistribution for DamageDist {
    fn distribution<'t>(
        &self,
        sc: &Scope<'_>,
        _: &dyn NeuralContext<'t>,
    ) -> crate::symbolic::Result<FiniteDist<'t>> {
        if sc.current(self.hit)? == 1 {
            Ok(FiniteDist::uniform(&(1..=self.die).collect::<SmallVec<[Value; 8]>>()))
        } else {
            Ok(FiniteDist::point(0))
        }
    }
}

struct RoomObservation {
    hits: Vec<VarId>,
    coupling: HitCoupling,
}

impl ObservationModel for RoomObservation {
    fn factors(&self, z: Option<Value>) -> Vec<Factor> {
        match z {
            None => Vec::new(),
            Some(0) => self.hits.iter().map(|&var| Factor::Clamp { var, value: 0 }).collect(),
            Some(_) if self.hits.len() == 1 || self.coupling == HitCoupling::EachEnemy => {
                self.hits.iter().map(|&var| Factor::Clamp { var, value: 1 }).collect()
            }
            Some(_) => vec![Factor::Table {
                name: "any_hit".into(),
                reads: self.hits.clone(),
                weight: Arc::new(|v: &[Value]| f64::from(u8::from(v.iter().any(|&h| h == 1)))),
            }],
        }
    }

    fn likelihood(&self, state: &[Value], z: Option<Value>) -> f64 {
        let any = self.hits.iter().any(|h| state[h.0] == 1);
        match z {
            None => 1.0,
            Some(0) => f64::from(u8::from(!any)),
            Some(_) => f64::from(u8::from(any)),
        }
    }
}

impl EnemyRoom {
    pub fn new(n: i64, e: usize) -> Result<Self> {
        Self::with_coupling(n, e, 12, 4, HitCoupling::Union)
    }

    pub fn with_coupling(n: i64, e: usize, initial_hp: i64, die: i64, coupling: HitCoupling) -> Result<Self> {
        if n < 3 || !(1..=2).contains(&e) {
            return Err(EnemyRoomError::Config(format!("unsupported room N={n}, E={e}")));
        }
        let mut sb = Schema::builder();
        sb.var("agent_x", 1..=n).var("agent_y", 1..=n).exogenous("action");
        sb.cluster("agent", &["agent_x", "agent_y"]);
        for k in 0..e {
            let (x, y, h) = (format!("enemy{k}_x"), format!("enemy{k}_y"), format!("hit{k}"));
            sb.var(&x, 1..=n).var(&y, 1..=n).var(&h, [0, 1]);
            sb.cluster(&format!("enemy{k}"), &[&x, &y, &h]);
        }
        sb.var("hp", 0..=initial_hp).cluster("health", &["hp"]);
        let schema = Arc::new(sb.build()?);
        let id = |s: &str| schema.expect_id(s);
        let vars = RoomVars {
            ax: id("agent_x")?,
            ay: id("agent_y")?,
            ex: (0..e).map(|k| id(&format!("enemy{k}_x"))).collect::<std::result::Result<_, _>>()?,
            ey: (0..e).map(|k| id(&format!("enemy{k}_y"))).collect::<std::result::Result<_, _>>()?,
            hit: (0..e).map(|k| id(&format!("hit{k}"))).collect::<std::result::Result<_, _>>()?,
            hp: id("hp")?,
        };
        let RoomVars { ax, ay, hp, .. } = vars;

        let mut programs = Vec::with_capacity(e + 2);
        programs.push(ClusterProgram::new().rule(
            "agent_move",
            vec![Access::Prev(ax), Access::Prev(ay), Access::Exo(0)],
            vec![ax, ay],
            FnRule(move |sc: &Scope<'_>| {
                let a = sc.exo(0)?;
                let action = Action::from_index(a as usize)
                    .ok_or_else(|| crate::symbolic::SymbolicError::Contract(format!("action index {a}")))?;
                let p = step_within((sc.prev(ax)?, sc.prev(ay)?), action.delta(), n);
                Ok(smallvec![p.0, p.1])
            }),
        ));
        for k in 0..e {
            let (ex, ey, hit) = (vars.ex[k], vars.ey[k], vars.hit[k]);
            programs.push(
                ClusterProgram::new()
                    .choice(
                        "enemy_action",
                        None,
                        vec![Access::Prev(ex), Access::Prev(ey), Access::Current(ax), Access::Current(ay)],
                        PolicyDist { n, ex, ey, ax, ay },
                    )
                    .rule(
                        "enemy_move",
                        vec![Access::Prev(ex), Access::Prev(ey), Access::Choice(0)],
                        vec![ex, ey],
                        FnRule(move |sc: &Scope<'_>| {
                            let d = ENEMY_MOVES[sc.choice(0)? as usize];
                            let p = step_within((sc.prev(ex)?, sc.prev(ey)?), d, n);
                            Ok(smallvec![p.0, p.1])
                        }),
                    )
                    .choice(
                        "claw",
                        Some(hit),
                        vec![
                            Access::Prev(hp),
                            Access::Current(ex),
                            Access::Current(ey),
                            Access::Current(ax),
                            Access::Current(ay),
                        ],
                        HitDist { hp, ex, ey, ax, ay },
                    ),
            );
        }
        let mut health = ClusterProgram::new();
        for k in 0..e {
            health = health.choice(
                &format!("damage{k}"),
                None,
                vec![Access::Current(vars.hit[k])],
                DamageDist {
                    hit: vars.hit[k],
                    die,
                },
            );
        }
        let mut reads = vec![Access::Prev(hp)];
        reads.extend((0..e).map(Access::Choice));
        health = health.rule(
            "take_damage",
            reads,
            vec![hp],
            FnRule(move |sc: &Scope<'_>| {
                let before = sc.prev(hp)?;
                if before == 0 {
                    return Ok(smallvec![0]);
                }
                let mut dealt = 0;
                for k in 0..e {
                    dealt += sc.choice(k)?;
                }
                Ok(smallvec![(before - dealt).max(0)])
            }),
        );
        programs.push(health);
        let obs = Arc::new(RoomObservation {
            hits: vars.hit.clone(),
            coupling,
        });
        let model = Model::new(schema, programs, obs)?;
        Ok(Self {
            n,
            e,
            initial_hp,
            vars,
            model,
        })
    }

    /// Agent at `start`, full health, every enemy uniform over all cells.
    pub fn initial(&self, start: Pos) -> InitialDistribution {
        let v = &self.vars;
        let mut init = InitialDistribution::new()
            .fixed(v.ax, start.0)
            .fixed(v.ay, start.1)
            .fixed(v.hp, self.initial_hp);
        let cells: Vec<(Vec<Value>, f64)> = (1..=self.n)
            .flat_map(|x| (1..=self.n).map(move |y| (vec![x, y, 0], 1.0)))
            .collect();
        for k in 0..self.e {
            init = init.block(vec![v.ex[k], v.ey[k], v.hit[k]], cells.clone());
        }
        init
    }

    /// Exogenous inputs of steps `1..=T`.
    pub fn exos(traj: &Trajectory) -> Vec<Vec<Value>> {
        traj.actions.iter().map(|a| vec![a.index() as Value]).collect()
    }

    /// Observations of steps `1..=T`.
    pub fn observations(traj: &Trajectory) -> Vec<Option<Value>> {
        traj.hit_obs.iter().map(|&h| Some(Value::from(h))).collect()
    }

    pub fn is_dead(&self, state: &[Value]) -> bool {
        state[self.vars.hp.0] == 0
    }

    pub fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        traj.validate()?;
        if traj.n != self.n || traj.e != self.e {
            return Err(EnemyRoomError::Config(format!(
                "trajectory for N={}, E={} given to a model for N={}, E={}",
                traj.n, traj.e, self.n, self.e
            )));
        }
        Ok(())
    }
}
