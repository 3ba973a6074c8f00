//! Training loop: batch assembly, the three forward passes, masked losses,
//! scheduled total loss and SGD updates, with metric logging and checkpoints.
//!
//! Every discrete or gradient-stopped quantity of a step (hard negatives,
//! objectness and type masks, Type-II targets) is fixed in a [`StepPlan`]
//! computed from the forward pass at the current parameters. The objective is
//! then a smooth function of θ for a fixed plan, which is what the gradient
//! checks differentiate.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::annotation::{AnnotatedObject, Annotation};
use crate::augment::{flip_image, mix_images, sample_lambda, FlipMap, ShuffleKind};
use crate::data::Sample;
use crate::detector::{
    encode_gt, mine_hard_negatives, multibox_batch, ArchConfig, Checkpoint, ConvDetector, DetectorModel, GridGrad,
    MatchTargets, MultiboxItem, PredictionGrid, Tape,
};
use crate::error::{Error, Result};
use crate::eval::{detect, evaluate, EvalReport, Interpolation, PostProcess, DEFAULT_MATCH_IOU};
use crate::geometry::BBox;
use crate::masks::{objectness_mask, type_masks, ObjectnessMask, TypeMasks};
use crate::ssl_losses::{
    check_gammas, csd_batch, type1_batch, type2_batch, weight_schedule, CsdItem, LossBreakdown, MixedGrads, MixedItem,
    Side,
};
use crate::tensor::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Supervised,
    Csd,
    Isd,
    CsdIsd,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Supervised, Mode::Csd, Mode::Isd, Mode::CsdIsd];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Csd => "csd",
            Mode::Isd => "isd",
            Mode::CsdIsd => "csd+isd",
        }
    }

    pub fn uses_csd(self) -> bool {
        matches!(self, Mode::Csd | Mode::CsdIsd)
    }

    pub fn uses_isd(self) -> bool {
        matches!(self, Mode::Isd | Mode::CsdIsd)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?} (supervised, csd, isd, csd+isd)")))
    }
}

impl Serialize for Mode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which interpolation-consistency terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsdTypes {
    Type1,
    Type2,
    #[default]
    Both,
}

impl IsdTypes {
    pub fn type1(self) -> bool {
        matches!(self, IsdTypes::Type1 | IsdTypes::Both)
    }

    pub fn type2(self) -> bool {
        matches!(self, IsdTypes::Type2 | IsdTypes::Both)
    }
}

impl FromStr for IsdTypes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "type1" => Ok(IsdTypes::Type1),
            "type2" => Ok(IsdTypes::Type2),
            "both" => Ok(IsdTypes::Both),
            _ => Err(Error::config(format!("unknown ISD types {s:?} (type1, type2, both)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: Mode,
    pub types: IsdTypes,
    /// Beta(α, α) parameter for the mixing coefficient.
    pub alpha: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub batch_size: usize,
    /// Share of each batch drawn from the labeled set.
    pub labeled_fraction: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iterations: usize,
    /// Iterations at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub max_iterations: usize,
    pub ramp_up: usize,
    pub ramp_down: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub neg_pos_ratio: f64,
    pub match_iou: f64,
    /// Random horizontal flips of labeled images for the supervised term.
    pub flip_labeled: bool,
    pub csd_loc_scale: f64,
    /// Restrict the interpolation losses to unlabeled batch items.
    pub isd_unlabeled_only: bool,
    pub shuffle: ShuffleKind,
    /// Use this mixing coefficient instead of sampling one.
    pub force_lambda: Option<f64>,
    pub eval_iou: f64,
    pub postprocess: PostProcess,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::CsdIsd,
            types: IsdTypes::Both,
            alpha: 100.0,
            gamma1: 0.1,
            gamma2: 1.0,
            batch_size: 16,
            labeled_fraction: 0.5,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_iterations: 100,
            lr_milestones: vec![],
            lr_decay: 0.1,
            max_iterations: 3000,
            ramp_up: 1000,
            ramp_down: 500,
            eval_every: 500,
            checkpoint_every: 2000,
            neg_pos_ratio: 3.0,
            match_iou: 0.5,
            flip_labeled: true,
            csd_loc_scale: 0.25,
            isd_unlabeled_only: false,
            shuffle: ShuffleKind::HalfRotation,
            force_lambda: None,
            eval_iou: DEFAULT_MATCH_IOU,
            postprocess: PostProcess::default(),
            arch: ArchConfig::toy(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn labeled_per_batch(&self) -> usize {
        ((self.batch_size as f64 * self.labeled_fraction).round() as usize).min(self.batch_size)
    }

    pub fn unlabeled_per_batch(&self) -> usize {
        self.batch_size - self.labeled_per_batch()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        check_gammas(self.gamma1, self.gamma2)?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::config(format!(
                "labeled_fraction must be in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        if self.labeled_per_batch() == 0 {
            return Err(Error::config(
                "batch has no labeled images; the supervised loss is required every step",
            ));
        }
        if self.ramp_up + self.ramp_down > self.max_iterations {
            return Err(Error::config(format!(
                "ramp lengths {} + {} exceed max_iterations {}",
                self.ramp_up, self.ramp_down, self.max_iterations
            )));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("eval_every and checkpoint_every must be positive"));
        }
        if let Some(l) = self.force_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config(format!("force_lambda {l} outside [0, 1]")));
            }
        }
        if self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("optimizer settings out of range"));
        }
        self.arch.validate()
    }

    /// Learning rate at iteration `t` (1-based).
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        let mut lr = self.learning_rate;
        if self.warmup_iterations > 0 && t <= self.warmup_iterations {
            lr *= t as f64 / self.warmup_iterations as f64;
        }
        for &m in &self.lr_milestones {
            if t > m {
                lr *= self.lr_decay;
            }
        }
        lr
    }
}

/// Shuffled pass over `0..len`, reshuffled at every wraparound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(len: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            pos: 0,
            epoch: 0,
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn take(&mut self, n: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                    self.epoch += 1;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Everything besides θ and momentum needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub labeled: EpochSampler,
    pub unlabeled: EpochSampler,
    /// λ and random-cycle permutations.
    pub mix_rng: ChaCha8Rng,
    /// Labeled flip augmentation.
    pub aug_rng: ChaCha8Rng,
}

/// The images of one step. `a` holds labeled items first.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub a: Vec<Image>,
    /// Horizontal flips of `a`; absent in supervised mode.
    pub a_flip: Option<Vec<Image>>,
    /// `Mix_λ(a[i], a_flip[perm[i]])`; present only when interpolation losses are on.
    pub m: Option<Vec<Image>>,
    pub lam: f64,
    pub perm: Vec<usize>,
    /// Matching targets of the labeled prefix of `a`.
    pub targets: Vec<MatchTargets>,
}

impl StepBatch {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.targets.len()
    }

    pub fn forward_passes(&self) -> usize {
        1 + self.a_flip.is_some() as usize + self.m.is_some() as usize
    }

    /// Builds the flipped, shuffled and mixed views of `a`.
    pub fn assemble(
        a: Vec<Image>,
        targets: Vec<MatchTargets>,
        with_flip: bool,
        with_mix: bool,
        lam: f64,
        perm: Vec<usize>,
    ) -> Result<Self> {
        if targets.len() > a.len() {
            return Err(Error::shape("more targets than images"));
        }
        let a_flip = (with_flip || with_mix).then(|| a.iter().map(flip_image).collect::<Vec<_>>());
        let m = if with_mix {
            if perm.len() != a.len() {
                return Err(Error::shape("shuffle permutation does not match the batch"));
            }
            let flips = a_flip.as_ref().expect("flipped view exists");
            Some(
                a.iter()
                    .zip(&perm)
                    .map(|(x, &j)| mix_images(x, &flips[j], lam))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            a,
            a_flip,
            m,
            lam,
            perm,
            targets,
        })
    }
}

/// Options that shape a [`StepPlan`].
#[derive(Debug, Clone, Copy)]
pub struct PlanOptions {
    pub neg_pos_ratio: f64,
    pub csd_loc_scale: f64,
    pub csd: bool,
    pub isd: bool,
    pub isd_unlabeled_only: bool,
}

/// Gradient-stopped decisions of one step, fixed from the forward pass at θ.
#[derive(Debug, Clone)]
pub struct StepPlan {
    /// Classification-term locations per labeled item.
    pub selected: Vec<Vec<bool>>,
    pub mask_a: Vec<ObjectnessMask>,
    /// Batch items the flip-consistency loss applies to.
    pub csd_items: Vec<usize>,
    pub type_masks: Vec<TypeMasks>,
    /// Type-II targets: predictions on `A` and on the shuffled flips `B`.
    pub target_a: Vec<PredictionGrid>,
    pub target_b: Vec<PredictionGrid>,
    pub csd_loc_scale: f64,
}

/// Per-component multipliers of the differentiated objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossWeights {
    pub sup: f64,
    pub csd_cls: f64,
    pub csd_loc: f64,
    pub type1: f64,
    pub type2_cls: f64,
    pub type2_loc: f64,
}

/// Raw component values of the objective for a fixed plan.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Components {
    pub sup: f64,
    pub csd_cls: f64,
    pub csd_loc: f64,
    pub type1: f64,
    pub type2_cls: f64,
    pub type2_loc: f64,
    pub n_type1: usize,
    pub n_type2_a: usize,
    pub n_type2_b: usize,
    pub n_objectness_a: usize,
}

impl Components {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.sup * self.sup
            + w.csd_cls * self.csd_cls
            + w.csd_loc * self.csd_loc
            + w.type1 * self.type1
            + w.type2_cls * self.type2_cls
            + w.type2_loc * self.type2_loc
    }
}

struct Pass {
    grids: Vec<PredictionGrid>,
    tape: Tape,
}

struct Forward {
    a: Pass,
    flip: Option<Pass>,
    mix: Option<Pass>,
}

fn run_forward(model: &ConvDetector, batch: &StepBatch) -> Result<Forward> {
    let pass = |images: &[Image]| -> Result<Pass> {
        let (grids, tape) = model.forward_train(images)?;
        Ok(Pass { grids, tape })
    };
    Ok(Forward {
        a: pass(&batch.a)?,
        flip: batch.a_flip.as_deref().map(pass).transpose()?,
        mix: batch.m.as_deref().map(pass).transpose()?,
    })
}

fn derive_plan(fwd: &Forward, batch: &StepBatch, opts: &PlanOptions) -> Result<StepPlan> {
    let n = batch.len();
    let n_l = batch.num_labeled();
    let selected = (0..n_l)
        .map(|i| mine_hard_negatives(&fwd.a.grids[i], &batch.targets[i], opts.neg_pos_ratio))
        .collect();
    let mask_a: Vec<ObjectnessMask> = fwd.a.grids.iter().map(objectness_mask).collect();
    let csd_items = if opts.csd {
        // Unlabeled items only, unless the batch has none.
        if n_l < n {
            (n_l..n).collect()
        } else {
            (0..n).collect()
        }
    } else {
        Vec::new()
    };
    let (mut type_masks_v, mut target_a, mut target_b) = (Vec::new(), Vec::new(), Vec::new());
    if opts.isd {
        let flip = fwd
            .flip
            .as_ref()
            .ok_or_else(|| Error::shape("interpolation losses need the flipped pass"))?;
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let gb = &flip.grids[batch.perm[i]];
            let mut tm = type_masks(&mask_a[i], &objectness_mask(gb))?;
            if opts.isd_unlabeled_only && i < n_l {
                for v in [&mut tm.type1, &mut tm.type2_a, &mut tm.type2_b] {
                    v.iter_mut().for_each(|b| *b = false);
                }
            }
            type_masks_v.push(tm);
            target_a.push(fwd.a.grids[i].clone());
            target_b.push(gb.clone());
        }
    }
    Ok(StepPlan {
        selected,
        mask_a,
        csd_items,
        type_masks: type_masks_v,
        target_a,
        target_b,
        csd_loc_scale: opts.csd_loc_scale,
    })
}

fn objective_from_forward(
    model: &ConvDetector,
    flip_map: &FlipMap,
    batch: &StepBatch,
    plan: &StepPlan,
    fwd: &Forward,
    weights: &LossWeights,
    param_grad: Option<&mut [f64]>,
) -> Result<Components> {
    let n = batch.len();
    let n_l = batch.num_labeled();
    let want = param_grad.is_some();
    let zeros = |grids: &[PredictionGrid]| -> Vec<GridGrad> { grids.iter().map(GridGrad::zeros_like).collect() };
    let mut g_a = zeros(&fwd.a.grids);
    let mut g_f = fwd.flip.as_ref().map(|p| zeros(&p.grids));
    let mut g_m = fwd.mix.as_ref().map(|p| zeros(&p.grids));
    let mut c = Components {
        n_objectness_a: plan.mask_a.iter().map(ObjectnessMask::count).sum(),
        ..Default::default()
    };

    let items: Vec<MultiboxItem<'_>> = (0..n_l)
        .map(|i| MultiboxItem {
            grid: &fwd.a.grids[i],
            targets: &batch.targets[i],
            selected: &plan.selected[i],
        })
        .collect();
    let sup = multibox_batch(&items, want.then_some((&mut g_a[..n_l], weights.sup)));
    c.sup = sup.total();

    if !plan.csd_items.is_empty() {
        let flip = fwd
            .flip
            .as_ref()
            .ok_or_else(|| Error::shape("flip-consistency loss needs the flipped pass"))?;
        let corresponded = plan
            .csd_items
            .iter()
            .map(|&i| flip_map.apply(&flip.grids[i]))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<CsdItem<'_>> = plan
            .csd_items
            .iter()
            .zip(&corresponded)
            .map(|(&i, g)| CsdItem {
                original: &fwd.a.grids[i],
                flipped: g,
                mask: &plan.mask_a[i],
            })
            .collect();
        let mut go = zeros(&corresponded);
        let mut gc = zeros(&corresponded);
        let v = csd_batch(
            &items,
            plan.csd_loc_scale,
            want.then_some((&mut go[..], &mut gc[..], weights.csd_cls, weights.csd_loc)),
        );
        c.csd_cls = v.cls;
        c.csd_loc = v.loc;
        if want {
            let gf = g_f.as_mut().expect("flip gradients exist");
            for ((&i, o), f) in plan.csd_items.iter().zip(&go).zip(&gc) {
                g_a[i].accumulate(o);
                gf[i].accumulate(&flip_map.pull_back(f));
            }
        }
    }

    if !plan.type_masks.is_empty() {
        let flip = fwd.flip.as_ref().ok_or_else(|| Error::shape("missing flipped pass"))?;
        let mix = fwd.mix.as_ref().ok_or_else(|| Error::shape("missing mixed pass"))?;
        let live_b: Vec<PredictionGrid> = batch.perm.iter().map(|&j| flip.grids[j].clone()).collect();
        let live: Vec<MixedItem<'_>> = (0..n)
            .map(|i| MixedItem {
                a: &fwd.a.grids[i],
                b: &live_b[i],
                m: &mix.grids[i],
                masks: &plan.type_masks[i],
            })
            .collect();
        let mut gb = zeros(&live_b);
        let gm = g_m.as_mut().expect("mixed gradients exist");
        let t1 = type1_batch(
            &live,
            batch.lam,
            want.then_some((
                MixedGrads {
                    a: &mut g_a[..],
                    b: &mut gb[..],
                    m: &mut gm[..],
                },
                weights.type1,
            )),
        );
        c.type1 = t1.value;
        c.n_type1 = t1.count;
        let fixed: Vec<MixedItem<'_>> = (0..n)
            .map(|i| MixedItem {
                a: &plan.target_a[i],
                b: &plan.target_b[i],
                m: &mix.grids[i],
                masks: &plan.type_masks[i],
            })
            .collect();
        for side in [Side::A, Side::B] {
            let v = type2_batch(
                &fixed,
                side,
                want.then_some((&mut gm[..], weights.type2_cls, weights.type2_loc)),
            );
            c.type2_cls += v.cls;
            c.type2_loc += v.loc;
            match side {
                Side::A => c.n_type2_a = v.count,
                Side::B => c.n_type2_b = v.count,
            }
        }
        if want {
            let gf = g_f.as_mut().expect("flip gradients exist");
            for (i, &j) in batch.perm.iter().enumerate() {
                gf[j].accumulate(&gb[i]);
            }
        }
    }

    if let Some(pg) = param_grad {
        model.backward(&fwd.a.tape, &g_a, pg)?;
        if let (Some(p), Some(g)) = (&fwd.flip, &g_f) {
            model.backward(&p.tape, g, pg)?;
        }
        if let (Some(p), Some(g)) = (&fwd.mix, &g_m) {
            model.backward(&p.tape, g, pg)?;
        }
    }
    Ok(c)
}

/// Runs the forward passes at the model's current θ and fixes the plan.
pub fn plan_step(model: &ConvDetector, batch: &StepBatch, opts: &PlanOptions) -> Result<StepPlan> {
    derive_plan(&run_forward(model, batch)?, batch, opts)
}

/// Objective components at the model's θ for a fixed plan; accumulates
/// `∂(Σ weights · components)/∂θ` into `param_grad` when given.
pub fn step_objective(
    model: &ConvDetector,
    flip_map: &FlipMap,
    batch: &StepBatch,
    plan: &StepPlan,
    weights: &LossWeights,
    param_grad: Option<&mut [f64]>,
) -> Result<Components> {
    let fwd = run_forward(model, batch)?;
    objective_from_forward(model, flip_map, batch, plan, &fwd, weights, param_grad)
}

/// One row of the per-step metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub w: f64,
    /// Mixing coefficient; 0 when no mixed batch is built.
    pub lam: f64,
    pub lr: f64,
    pub l_sup: f64,
    pub l_csd_cls: f64,
    pub l_csd_loc: f64,
    pub l_type1: f64,
    pub l_type2_cls: f64,
    pub l_type2_loc: f64,
    pub l_isd: f64,
    pub l_total: f64,
    pub n_type1: usize,
    pub n_type2_a: usize,
    pub n_type2_b: usize,
    pub n_objectness_a: usize,
    pub forward_passes: usize,
}

impl StepRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_sup: self.l_sup,
            l_csd_cls: self.l_csd_cls,
            l_csd_loc: self.l_csd_loc,
            l_type1: self.l_type1,
            l_type2_cls: self.l_type2_cls,
            l_type2_loc: self.l_type2_loc,
            l_isd: self.l_isd,
            l_total: self.l_total,
            n_type1: self.n_type1,
            n_type2_a: self.n_type2_a,
            n_type2_b: self.n_type2_b,
            n_objectness_a: self.n_objectness_a,
        }
    }
}

/// One row of the evaluation log; APs and mAP in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub t: usize,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
}

impl EvalRecord {
    pub fn from_report(t: usize, r: &EvalReport) -> Self {
        Self {
            t,
            per_class_ap: r.per_class_ap.iter().map(|a| a.map(|v| 100.0 * v)).collect(),
            map: 100.0 * r.map,
        }
    }
}

/// Labeled, unlabeled and held-out samples of a run.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a [Sample],
    pub unlabeled: &'a [Sample],
    pub eval: &'a [Sample],
}

fn flip_annotation(a: &Annotation) -> Annotation {
    Annotation::new(
        a.objects
            .iter()
            .map(|o| AnnotatedObject {
                bbox: BBox::new(1.0 - o.bbox.xmax, o.bbox.ymin, 1.0 - o.bbox.xmin, o.bbox.ymax),
                ..o.clone()
            })
            .collect(),
    )
}

/// Model, optimizer and sampling state of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: ConvDetector,
    velocity: Vec<f64>,
    state: TrainState,
    flip_map: FlipMap,
}

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    config: TrainConfig,
    state: TrainState,
}

impl Trainer {
    /// Fresh run; all randomness derives from `config.seed`.
    pub fn new(config: TrainConfig, n_labeled: usize, n_unlabeled: usize) -> Result<Self> {
        config.validate()?;
        if n_labeled == 0 {
            return Err(Error::Data("labeled set is empty".into()));
        }
        let model = ConvDetector::new(config.arch.clone(), config.seed)?;
        let flip_map = FlipMap::new(model.default_boxes())?;
        let state = TrainState {
            iteration: 0,
            labeled: EpochSampler::new(n_labeled, stream(config.seed, 1)),
            unlabeled: EpochSampler::new(n_unlabeled, stream(config.seed, 2)),
            mix_rng: stream(config.seed, 3),
            aug_rng: stream(config.seed, 4),
        };
        Ok(Self {
            velocity: vec![0.0; model.params().len()],
            config,
            model,
            state,
            flip_map,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let extra: CheckpointExtra = serde_json::from_value(ck.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("no trainer state in checkpoint: {e}")))?;
        if extra.config.arch != ck.arch {
            return Err(Error::Checkpoint(
                "trainer config and stored architecture disagree".into(),
            ));
        }
        let velocity = ck
            .velocity
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let model = ck.into_model()?;
        if velocity.len() != model.params().len() {
            return Err(Error::Checkpoint("optimizer state has the wrong length".into()));
        }
        let flip_map = FlipMap::new(model.default_boxes())?;
        Ok(Self {
            config: extra.config,
            model,
            velocity,
            state: extra.state,
            flip_map,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.velocity = Some(self.velocity.clone());
        ck.extra = serde_json::to_value(CheckpointExtra {
            config: self.config.clone(),
            state: self.state.clone(),
        })?;
        Ok(ck)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ConvDetector {
        &self.model
    }

    pub fn flip_map(&self) -> &FlipMap {
        &self.flip_map
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn plan_options(&self) -> PlanOptions {
        PlanOptions {
            neg_pos_ratio: self.config.neg_pos_ratio,
            csd_loc_scale: self.config.csd_loc_scale,
            csd: self.config.mode.uses_csd(),
            isd: self.config.mode.uses_isd(),
            isd_unlabeled_only: self.config.isd_unlabeled_only,
        }
    }

    /// Objective multipliers at schedule weight `w`.
    pub fn loss_weights(&self, w: f64) -> LossWeights {
        let c = &self.config;
        let (csd, isd) = (c.mode.uses_csd(), c.mode.uses_isd());
        let on = |b: bool, v: f64| if b { v } else { 0.0 };
        LossWeights {
            sup: 1.0,
            csd_cls: on(csd, w),
            csd_loc: on(csd, w),
            type1: on(isd && c.types.type1(), w * c.gamma1),
            type2_cls: on(isd && c.types.type2(), w * c.gamma2),
            type2_loc: on(isd && c.types.type2(), w * c.gamma2),
        }
    }

    /// Draws the next batch and advances the sampling state.
    pub fn next_batch(&mut self, labeled: &[Sample], unlabeled: &[Sample]) -> Result<StepBatch> {
        let c = &self.config;
        if labeled.len() != self.state.labeled.len() {
            return Err(Error::Data(format!(
                "labeled set has {} samples, the run was set up for {}",
                labeled.len(),
                self.state.labeled.len()
            )));
        }
        let ssl = c.mode != Mode::Supervised;
        let n_u = if ssl { c.unlabeled_per_batch() } else { 0 };
        if n_u > 0 && (unlabeled.is_empty() || unlabeled.len() != self.state.unlabeled.len()) {
            return Err(Error::Data(format!(
                "unlabeled set has {} samples, the run needs {} per batch from a set of {}",
                unlabeled.len(),
                n_u,
                self.state.unlabeled.len()
            )));
        }
        let boxes = self.model.default_boxes();
        let mut a = Vec::with_capacity(c.batch_size);
        let mut targets = Vec::with_capacity(c.labeled_per_batch());
        for i in self.state.labeled.take(c.labeled_per_batch()) {
            let s = &labeled[i];
            let mut image = Image::from_rgb(&s.image);
            let mut ann = s.annotation.training_objects();
            if c.flip_labeled && self.state.aug_rng.random_bool(0.5) {
                image = flip_image(&image);
                ann = flip_annotation(&ann);
            }
            targets.push(encode_gt(&ann, boxes, c.match_iou)?);
            a.push(image);
        }
        for i in self.state.unlabeled.take(n_u) {
            a.push(Image::from_rgb(&unlabeled[i].image));
        }
        let n = a.len();
        let isd = c.mode.uses_isd();
        let (lam, perm) = if isd {
            let lam = match c.force_lambda {
                Some(l) => l,
                None => sample_lambda(c.alpha, &mut self.state.mix_rng)?,
            };
            let perm = match c.shuffle {
                ShuffleKind::HalfRotation => crate::augment::half_rotation(n),
                ShuffleKind::RandomCycle => {
                    let mut p: Vec<usize> = (0..n).collect();
                    for i in (1..n).rev() {
                        let j = self.state.mix_rng.random_range(0..i);
                        p.swap(i, j);
                    }
                    p
                }
            };
            (lam, perm)
        } else {
            (0.0, Vec::new())
        };
        StepBatch::assemble(a, targets, ssl, isd, lam, perm)
    }

    /// One iteration: batch, forward passes, plan, losses, SGD update.
    pub fn step(&mut self, labeled: &[Sample], unlabeled: &[Sample]) -> Result<StepRecord> {
        let t = self.state.iteration + 1;
        if t > self.config.max_iterations {
            return Err(Error::config(format!(
                "iteration {t} beyond max_iterations {}",
                self.config.max_iterations
            )));
        }
        let batch = self.next_batch(labeled, unlabeled)?;
        let w = if self.config.mode == Mode::Supervised {
            0.0
        } else {
            weight_schedule(
                t,
                self.config.ramp_up,
                self.config.max_iterations,
                self.config.ramp_down,
            )?
        };
        let weights = self.loss_weights(w);
        let fwd = run_forward(&self.model, &batch)?;
        let plan = derive_plan(&fwd, &batch, &self.plan_options())?;
        let mut grad = vec![0.0; self.velocity.len()];
        let comps = objective_from_forward(
            &self.model,
            &self.flip_map,
            &batch,
            &plan,
            &fwd,
            &weights,
            Some(&mut grad),
        )?;
        drop(fwd);

        let c = &self.config;
        let lr = c.learning_rate_at(t);
        let theta = self.model.params_mut();
        for ((p, v), g) in theta.iter_mut().zip(self.velocity.iter_mut()).zip(&grad) {
            *v = c.momentum * *v + g + c.weight_decay * *p;
            *p -= lr * *v;
        }
        self.state.iteration = t;

        let csd = c.mode.uses_csd();
        let isd = c.mode.uses_isd();
        let keep = |on: bool, v: f64| if on { v } else { 0.0 };
        let l_type1 = keep(isd && c.types.type1(), comps.type1);
        let l_type2_cls = keep(isd && c.types.type2(), comps.type2_cls);
        let l_type2_loc = keep(isd && c.types.type2(), comps.type2_loc);
        let l_isd = c.gamma1 * l_type1 + c.gamma2 * (l_type2_cls + l_type2_loc);
        let (l_csd_cls, l_csd_loc) = (keep(csd, comps.csd_cls), keep(csd, comps.csd_loc));
        Ok(StepRecord {
            t,
            w,
            lam: batch.lam,
            lr,
            l_sup: comps.sup,
            l_csd_cls,
            l_csd_loc,
            l_type1,
            l_type2_cls,
            l_type2_loc,
            l_isd,
            l_total: crate::ssl_losses::total_loss(comps.sup, l_csd_cls + l_csd_loc, l_isd, w),
            n_type1: comps.n_type1,
            n_type2_a: comps.n_type2_a,
            n_type2_b: comps.n_type2_b,
            n_objectness_a: comps.n_objectness_a,
            forward_passes: batch.forward_passes(),
        })
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<EvalReport> {
        evaluate_model(&self.model, samples, &self.config.postprocess, self.config.eval_iou)
    }
}

/// mAP of `model` on `samples` with all-point interpolation.
pub fn evaluate_model(
    model: &ConvDetector,
    samples: &[Sample],
    post: &PostProcess,
    iou_threshold: f64,
) -> Result<EvalReport> {
    let images: Vec<Image> = samples.iter().map(|s| Image::from_rgb(&s.image)).collect();
    let dets = detect(model, &images, post)?;
    let gts: Vec<Annotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    evaluate(
        &dets,
        &gts,
        model.arch().num_classes,
        iou_threshold,
        Interpolation::AllPoint,
    )
}

pub const STEPS_CSV: &str = "steps.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// CSV writers for a run directory.
pub struct RunLog {
    dir: PathBuf,
    steps: csv::Writer<fs::File>,
    evals: csv::Writer<fs::File>,
}

fn open_csv(path: &Path, append: bool) -> Result<(csv::Writer<fs::File>, bool)> {
    let existing = append && path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(existing)
        .truncate(!existing)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let writer = csv::WriterBuilder::new().has_headers(!existing).from_writer(file);
    Ok((writer, existing))
}

impl RunLog {
    /// Creates (or, with `append`, continues) the logs in `dir`.
    pub fn open(dir: &Path, class_names: &[String], append: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (steps, _) = open_csv(&dir.join(STEPS_CSV), append)?;
        let (mut evals, existing) = open_csv(&dir.join(EVAL_CSV), append)?;
        if !existing {
            let mut header = vec!["t".to_string()];
            header.extend(class_names.iter().map(|n| format!("ap_{n}")));
            header.push("map".into());
            evals.write_record(&header)?;
            evals.flush().map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            steps,
            evals,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn step(&mut self, r: &StepRecord) -> Result<()> {
        self.steps.serialize(r)?;
        Ok(())
    }

    pub fn eval(&mut self, r: &EvalRecord) -> Result<()> {
        let mut row = vec![r.t.to_string()];
        row.extend(
            r.per_class_ap
                .iter()
                .map(|a| a.map(|v| v.to_string()).unwrap_or_default()),
        );
        row.push(r.map.to_string());
        self.evals.write_record(&row)?;
        self.evals.flush().map_err(|e| Error::io(&self.dir, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.steps.flush().map_err(|e| Error::io(&self.dir, e))?;
        self.evals.flush().map_err(|e| Error::io(&self.dir, e))
    }
}

/// Metrics of a (possibly partial) run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunOutput {
    /// mAP (percent) of the last evaluation.
    pub fn final_map(&self) -> Option<f64> {
        self.evals.last().map(|e| e.map)
    }
}

/// Trains until `until` (capped at `max_iterations`), evaluating every
/// `eval_every` steps and at the end of training, checkpointing every
/// `checkpoint_every` steps when a log directory is given.
pub fn run_until(
    trainer: &mut Trainer,
    data: &TrainData<'_>,
    until: usize,
    mut log: Option<&mut RunLog>,
) -> Result<RunOutput> {
    let end = until.min(trainer.config.max_iterations);
    let mut out = RunOutput::default();
    let started = Instant::now();
    while trainer.iteration() < end {
        let rec = trainer.step(data.labeled, data.unlabeled)?;
        let t = rec.t;
        if let Some(l) = log.as_deref_mut() {
            l.step(&rec)?;
        }
        out.steps.push(rec);
        let cfg = &trainer.config;
        if t % 50 == 0 {
            log::info!(
                "[{} seed {}] t={t} L_total={:.4} L_S={:.4} w={:.3} ({:.1}s)",
                cfg.mode,
                cfg.seed,
                rec.l_total,
                rec.l_sup,
                rec.w,
                started.elapsed().as_secs_f64()
            );
        }
        if !data.eval.is_empty() && (t % cfg.eval_every == 0 || t == cfg.max_iterations) {
            let report = trainer.evaluate(data.eval)?;
            let e = EvalRecord::from_report(t, &report);
            log::info!("[{} seed {}] t={t} mAP={:.2}", cfg.mode, cfg.seed, e.map);
            if let Some(l) = log.as_deref_mut() {
                l.eval(&e)?;
            }
            out.evals.push(e);
        }
        if let Some(l) = log.as_deref_mut() {
            if t % cfg.checkpoint_every == 0 {
                let path = l.dir().join("checkpoints").join(format!("iter_{t:06}.ckpt"));
                trainer.checkpoint()?.save(&path)?;
            }
        }
    }
    if let Some(l) = log {
        l.flush()?;
    }
    Ok(out)
}

/// Full run from a fresh trainer. With `out_dir`, writes the config, metrics
/// CSVs, periodic checkpoints and a final checkpoint there.
pub fn train(
    config: TrainConfig,
    data: &TrainData<'_>,
    class_names: &[String],
    out_dir: Option<&Path>,
) -> Result<(Trainer, RunOutput)> {
    if class_names.len() != config.arch.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, the architecture predicts {}",
            class_names.len(),
            config.arch.num_classes
        )));
    }
    let mut trainer = Trainer::new(config, data.labeled.len(), data.unlabeled.len())?;
    let mut log = match out_dir {
        Some(dir) => {
            let log = RunLog::open(dir, class_names, false)?;
            let cfg_path = dir.join(CONFIG_FILE);
            fs::write(&cfg_path, trainer.config.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
            Some(log)
        }
        None => None,
    };
    let until = trainer.config.max_iterations;
    let out = run_until(&mut trainer, data, until, log.as_mut())?;
    if let Some(dir) = out_dir {
        trainer.checkpoint()?.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((trainer, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_round_trip() {
        let cfg = TrainConfig {
            force_lambda: Some(1.0),
            lr_milestones: vec![10, 20],
            ..Default::default()
        };
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml("mode = \"isd\"\nalpha = 1.0\n").unwrap();
        assert_eq!(partial.mode, Mode::Isd);
        assert_eq!(partial.gamma1, 0.1);
        assert!(TrainConfig::from_toml("alpha = 0.0").is_err());
        assert!(TrainConfig::from_toml("gamma2 = -1.0").is_err());
        assert!(TrainConfig::from_toml("labeled_fraction = 0.01").is_err());
        assert!(TrainConfig::from_toml("no_such_key = 1").is_err());
    }

    #[test]
    fn mode_names() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("semi".parse::<Mode>().is_err());
    }

    #[test]
    fn sampler_visits_everything_once_per_epoch() {
        let mut s = EpochSampler::new(7, stream(3, 1));
        for epoch in 0..3 {
            let mut seen = s.take(7);
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
            assert_eq!(s.epoch(), epoch);
        }
        let mut a = EpochSampler::new(5, stream(9, 1));
        let mut b = a.clone();
        assert_eq!(a.take(12), b.take(12));
    }

    #[test]
    fn annotation_flip_is_an_involution() {
        let a = Annotation::new(vec![AnnotatedObject {
            class_id: 2,
            bbox: BBox::new(0.125, 0.25, 0.5, 0.75),
            difficult: false,
        }]);
        let f = flip_annotation(&a);
        assert_eq!(f.objects[0].bbox, BBox::new(0.5, 0.25, 0.875, 0.75));
        assert_eq!(flip_annotation(&f), a);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            warmup_iterations: 10,
            lr_milestones: vec![100],
            lr_decay: 0.5,
            ..Default::default()
        };
        assert!((cfg.learning_rate_at(5) - 0.05).abs() < 1e-15);
        assert_eq!(cfg.learning_rate_at(50), 0.1);
        assert_eq!(cfg.learning_rate_at(101), 0.05);
    }
}
