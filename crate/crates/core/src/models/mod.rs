//! The six Q-network architectures and their configuration.

mod network;

pub use network::{LayerRow, QNetwork};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::snn::{DendriteSharing, Readout, ResetMode};
use crate::tensor::Surrogate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Dqn,
    Dsqn,
    DqnD,
    DsqnD,
    MtsparkAd,
    MtsparkAdd,
}

impl ArchKind {
    pub const ALL: [ArchKind; 6] =
        [ArchKind::Dqn, ArchKind::Dsqn, ArchKind::DqnD, ArchKind::DsqnD, ArchKind::MtsparkAd, ArchKind::MtsparkAdd];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Dqn => "dqn",
            ArchKind::Dsqn => "dsqn",
            ArchKind::DqnD => "dqn_d",
            ArchKind::DsqnD => "dsqn_d",
            ArchKind::MtsparkAd => "mtspark_ad",
            ArchKind::MtsparkAdd => "mtspark_add",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown architecture kind `{name}`")))
    }

    pub fn is_spiking(self) -> bool {
        !matches!(self, ArchKind::Dqn | ArchKind::DqnD)
    }

    pub fn is_dueling(self) -> bool {
        matches!(self, ArchKind::DqnD | ArchKind::DsqnD | ArchKind::MtsparkAdd)
    }

    pub fn has_dendrites(self) -> bool {
        matches!(self, ArchKind::MtsparkAd | ArchKind::MtsparkAdd)
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s)
    }
}

/// How the dueling value and advantage heads are fed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuelingLayout {
    /// Each head has its own FC(features→width) stream.
    #[default]
    TwoStreams,
    /// One FC stream shared by both heads.
    SharedHidden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub action_count: usize,
    pub task_count: usize,
    /// `(channels, height, width)`.
    pub input: [usize; 3],
    pub fc_width: usize,
    pub dendrite_sharing: DendriteSharing,
    pub t_sim: usize,
    pub readout: Readout,
    pub reset: ResetMode,
    pub v_th: f64,
    pub surrogate: Surrogate,
    pub dueling_layout: DuelingLayout,
}

impl ArchitectureSpec {
    /// Full-size profile: 84×84×4 input, 512-wide FC.
    pub fn new(kind: ArchKind) -> Self {
        Self {
            kind,
            action_count: 18,
            task_count: 3,
            input: [4, 84, 84],
            fc_width: 512,
            dendrite_sharing: DendriteSharing::default(),
            t_sim: 4,
            readout: Readout::default(),
            reset: ResetMode::default(),
            v_th: 1.0,
            surrogate: Surrogate::default(),
            dueling_layout: DuelingLayout::default(),
        }
    }

    /// Reduced profile for fast runs: 44×44×2 input, 128-wide FC. 44 is the
    /// smallest size near half-scale that the trunk tiles without dropping
    /// border pixels.
    pub fn downscale(kind: ArchKind) -> Self {
        Self { input: [2, 44, 44], fc_width: 128, ..Self::new(kind) }
    }

    /// Number of simulation steps the network actually runs.
    pub fn steps(&self) -> usize {
        if self.kind.is_spiking() {
            self.t_sim
        } else {
            1
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.action_count == 0 {
            return fail("action_count must be at least 1");
        }
        if self.task_count == 0 {
            return fail("task_count must be at least 1");
        }
        if self.fc_width == 0 {
            return fail("fc_width must be at least 1");
        }
        if self.kind.is_spiking() && self.t_sim == 0 {
            return fail("t_sim must be at least 1");
        }
        if !(self.v_th.is_finite() && self.v_th > 0.0) {
            return fail("v_th must be positive");
        }
        if self.input.contains(&0) {
            return fail("input extents must be positive");
        }
        self.surrogate.validate()
    }

    pub fn v_th_as<S: Scalar>(&self) -> S {
        S::lit(self.v_th)
    }
}

/// `Q_a = V + A_a - mean(A)` for a batch: `value [N]`, `advantage [N, A]`.
pub fn dueling_combine<S: Scalar>(value: &[S], advantage: &[S], actions: usize) -> Result<Vec<S>> {
    if actions == 0 || advantage.len() != value.len() * actions {
        return Err(Error::dim("dueling_combine", "advantage length", value.len() * actions, advantage.len()));
    }
    let inv = S::one() / S::lit(actions as f64);
    let mut q = Vec::with_capacity(advantage.len());
    for (v, row) in value.iter().zip(advantage.chunks(actions)) {
        let mean = row.iter().copied().sum::<S>() * inv;
        q.extend(row.iter().map(|a| *v + (*a - mean)));
    }
    Ok(q)
}

/// Gradients of [`dueling_combine`] w.r.t. value and advantage.
pub fn dueling_combine_backward<S: Scalar>(grad_q: &[S], actions: usize) -> (Vec<S>, Vec<S>) {
    let inv = S::one() / S::lit(actions as f64);
    let mut gv = Vec::with_capacity(grad_q.len() / actions);
    let mut ga = Vec::with_capacity(grad_q.len());
    for row in grad_q.chunks(actions) {
        let sum = row.iter().copied().sum::<S>();
        gv.push(sum);
        ga.extend(row.iter().map(|g| *g - sum * inv));
    }
    (gv, ga)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
