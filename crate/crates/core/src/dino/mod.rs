//! Label-free pre-training by self-distillation.
//!
//! A student network (ViT + projection head) is trained to match, on every
//! view of an image, the sharpened and centred output distribution that an
//! EMA teacher produces on the two global views. The teacher never receives
//! gradients; it follows the student through
//! `theta_t <- lambda * theta_t + (1 - lambda) * theta_s`.

mod head;
mod views;

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use head::{head_forward, HeadConfig, ProjectionHead};
pub use views::{make_views, AugmentConfig, View, ViewKind, ViewSet};

use crate::error::{Error, Result};
use crate::params::{add_grads, ParamStore};
use crate::rng::{mix_seed, seeded};
use crate::tensor::{softmax_tensor, AdamW, Graph, Tensor, Var};
use crate::vit::{self, Vit, VitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DinoConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub weight_decay: f64,
    /// EMA factor at step 0; ramps to 1 by the last step.
    pub ema_start: f64,
    pub teacher_temp_warmup: f64,
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
    pub centering: bool,
    /// Upper bound on tiles drawn (seeded) from the dataset; `None` keeps all.
    pub max_tiles: Option<usize>,
    pub head: HeadConfig,
    pub augment: AugmentConfig,
}

impl Default for DinoConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 32,
            lr_min: 1e-6,
            lr_max: 5e-4,
            weight_decay: 0.04,
            ema_start: 0.9995,
            teacher_temp_warmup: 0.01,
            teacher_temp: 0.04,
            student_temp: 0.1,
            center_momentum: 0.9,
            centering: true,
            max_tiles: None,
            head: HeadConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch size must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Parameter(format!(
                "warm-up ({}) exceeds the number of epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        let temps = [self.teacher_temp_warmup, self.teacher_temp, self.student_temp];
        if temps.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Parameter("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_start) || !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::Parameter("EMA factor and center momentum must lie in [0, 1]".into()));
        }
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max) {
            return Err(Error::Parameter("need 0 <= lr_min <= lr_max".into()));
        }
        Ok(())
    }
}

/// Linear warm-up from `lr_min` to `lr_max`, then a cosine half-period back to `lr_min`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, lr_min: f64, lr_max: f64) -> Result<f64> {
    if step > total_steps || warmup_steps > total_steps {
        return Err(Error::Parameter(format!(
            "need step ({step}) <= total ({total_steps}) and warm-up ({warmup_steps}) <= total"
        )));
    }
    if step <= warmup_steps {
        if warmup_steps == 0 {
            return Ok(lr_max);
        }
        return Ok(lr_min + (lr_max - lr_min) * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `warmup_value` during the first `warmup_steps` steps, `final_value` afterwards.
pub fn teacher_temp_at(step: usize, warmup_steps: usize, warmup_value: f64, final_value: f64) -> f64 {
    if step < warmup_steps {
        warmup_value
    } else {
        final_value
    }
}

/// Cosine ramp of the EMA factor from `start` at step 0 to 1 at `total_steps`.
pub fn ema_lambda_at(step: usize, total_steps: usize, start: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    1.0 - (1.0 - start) * ((std::f64::consts::PI * progress).cos() + 1.0) / 2.0
}

/// `center <- m * center + (1 - m) * mean(outputs)`.
pub fn update_center(center: &mut [f64], outputs: &[Vec<f64>], momentum: f64) -> Result<()> {
    if outputs.is_empty() {
        return Err(Error::Validation("center update needs a non-empty batch".into()));
    }
    let k = center.len();
    if let Some(bad) = outputs.iter().find(|o| o.len() != k) {
        return Err(Error::dim("update_center", &[k], &[bad.len()]));
    }
    let n = outputs.len() as f64;
    for (j, c) in center.iter_mut().enumerate() {
        let mean = outputs.iter().map(|o| o[j]).sum::<f64>() / n;
        *c = momentum * *c + (1.0 - momentum) * mean;
    }
    Ok(())
}

/// `softmax((logits - center) / temperature)`.
pub fn centered_softmax(logits: &[f64], center: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.len() != center.len() {
        return Err(Error::dim("teacher_distribution", &[logits.len()], &[center.len()]));
    }
    let shifted: Vec<f64> = logits.iter().zip(center).map(|(l, c)| l - c).collect();
    let n = shifted.len();
    Ok(softmax_tensor(&Tensor::matrix(1, n, shifted)?, temperature)?.into_data())
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// ViT followed by a projection head on the final `[cls]` row.
#[derive(Debug, Clone, PartialEq)]
pub struct DinoNet {
    pub vit: Vit,
    pub head: ProjectionHead,
}

/// Weights of a [`DinoNet`] bound onto a graph.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub vit: Vec<Var>,
    pub head: Vec<Var>,
}

impl DinoNet {
    pub fn new(vit_config: VitConfig, head_config: HeadConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed, 4);
        let vit = Vit::new(vit_config, &mut rng)?;
        let head = ProjectionHead::new(vit_config.embed_dim, head_config, &mut rng)?;
        Ok(Self { vit, head })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> NetVars {
        NetVars {
            vit: self.vit.params().bind(g, trainable),
            head: self.head.params().bind(g, trainable),
        }
    }

    /// `1 x out_dim` head logits for one view.
    pub fn forward(&self, g: &mut Graph, vars: &NetVars, image: &Tensor) -> Result<Var> {
        let trace = vit::forward(g, &vars.vit, self.vit.config(), self.vit.layout(), image)?;
        let cls = *trace.cls_rows.last().expect("at least one block");
        head_forward(g, &vars.head, cls)
    }

    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, image)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn out_dim(&self) -> usize {
        self.head.config().out_dim
    }

    pub fn grads(&self, g: &Graph, vars: &NetVars) -> NetGrads {
        NetGrads {
            vit: self.vit.params().grads(g, &vars.vit),
            head: self.head.params().grads(g, &vars.head),
        }
    }

    /// Teacher-side EMA towards `student`.
    pub fn ema_toward(&mut self, student: &DinoNet, lambda: f64) -> Result<()> {
        self.vit.params_mut().ema_toward(student.vit.params(), lambda)?;
        self.head.params_mut().ema_toward(student.head.params(), lambda)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub vit: Vec<Vec<f64>>,
    pub head: Vec<Vec<f64>>,
}

impl NetGrads {
    fn zeros_like(net: &DinoNet) -> Self {
        let z = |p: &ParamStore| p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            vit: z(net.vit.params()),
            head: z(net.head.params()),
        }
    }

    fn add(&mut self, other: &NetGrads) {
        add_grads(&mut self.vit, &other.vit);
        add_grads(&mut self.head, &other.head);
    }

    fn scale(&mut self, c: f64) {
        for g in self.vit.iter_mut().chain(self.head.iter_mut()) {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }
}

/// Loss graph for one view set, with both networks on the same tape.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub graph: Graph,
    pub loss: Var,
    pub student: NetVars,
    pub teacher: NetVars,
    /// Raw teacher logits for each global view.
    pub teacher_logits: Vec<Vec<f64>>,
    /// Centred, sharpened teacher distributions for each global view.
    pub teacher_probs: Vec<Vec<f64>>,
}

/// Builds the distillation loss: the mean over every pair of a global view
/// `t` (teacher side) and a different view `s` (student side) of
/// `H(P_teacher(t), P_student(s))`.
pub fn dino_loss_graph(
    student: &DinoNet,
    teacher: &DinoNet,
    views: &ViewSet,
    center: &[f64],
    student_temp: f64,
    teacher_temp: f64,
) -> Result<LossGraph> {
    let mut g = Graph::new();
    let teacher_vars = teacher.bind(&mut g, false);
    let student_vars = student.bind(&mut g, true);

    let mut teacher_logits = Vec::new();
    let mut teacher_probs = Vec::new();
    let mut global_index = Vec::new();
    for (i, view) in views.views.iter().enumerate() {
        if view.kind == ViewKind::Global {
            let out = teacher.forward(&mut g, &teacher_vars, &view.tensor)?;
            let logits = g.value(out).data().to_vec();
            if logits.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical {
                    step: 0,
                    detail: "teacher logits are not finite".into(),
                });
            }
            teacher_probs.push(centered_softmax(&logits, center, teacher_temp)?);
            teacher_logits.push(logits);
            global_index.push(i);
        }
    }
    if global_index.is_empty() {
        return Err(Error::Validation("distillation loss needs at least one global view".into()));
    }

    let student_out: Vec<Var> = views
        .views
        .iter()
        .map(|v| student.forward(&mut g, &student_vars, &v.tensor))
        .collect::<Result<_>>()?;
    let mut terms = Vec::new();
    for (t, &ti) in global_index.iter().enumerate() {
        for (si, &s) in student_out.iter().enumerate() {
            if si != ti {
                terms.push(g.softmax_cross_entropy(&teacher_probs[t], s, student_temp)?);
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::Validation("distillation loss needs at least two views".into()));
    }
    let n = terms.len() as f64;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let loss = g.scale(total, 1.0 / n);
    Ok(LossGraph {
        graph: g,
        loss,
        student: student_vars,
        teacher: teacher_vars,
        teacher_logits,
        teacher_probs,
    })
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Entropy of the batch-averaged teacher distribution.
    pub teacher_entropy: f64,
    /// Mean entropy of the individual teacher distributions.
    pub sample_entropy: f64,
    pub lr: f64,
    pub tau_t: f64,
    pub lambda: f64,
}

/// Student, teacher, center and optimizer state of a run.
#[derive(Debug, Clone)]
pub struct DinoState {
    pub config: DinoConfig,
    pub student: DinoNet,
    pub teacher: DinoNet,
    pub center: Vec<f64>,
    pub step: usize,
    opt_vit: AdamW,
    opt_head: AdamW,
}

impl DinoState {
    /// Teacher starts as an exact copy of the student.
    pub fn new(vit_config: VitConfig, config: DinoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let student = DinoNet::new(vit_config, config.head, seed)?;
        let teacher = student.clone();
        let opt = AdamW::new(0.9, 0.999, 1e-8, config.weight_decay);
        Ok(Self {
            center: vec![0.0; config.head.out_dim],
            config,
            student,
            teacher,
            step: 0,
            opt_vit: opt.clone(),
            opt_head: opt,
        })
    }

    /// Teacher distribution for a global view.
    pub fn teacher_distribution(&self, view: &View, teacher_temp: f64) -> Result<Vec<f64>> {
        if view.kind != ViewKind::Global {
            return Err(Error::Usage("the teacher only sees global views".into()));
        }
        let logits = self.teacher.logits(&view.tensor)?;
        centered_softmax(&logits, &self.center, teacher_temp)
    }

    /// One optimisation step over `batch` view sets, given the schedules' values.
    pub fn train_step(&mut self, batch: &[ViewSet], lr: f64, teacher_temp: f64, lambda: f64) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let student_temp = self.config.student_temp;
        let one = |views: &ViewSet| -> Result<(f64, NetGrads, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
            let mut lg = dino_loss_graph(&self.student, &self.teacher, views, &self.center, student_temp, teacher_temp)?;
            let loss = lg.graph.value(lg.loss).item();
            lg.graph.backward(lg.loss)?;
            Ok((loss, self.student.grads(&lg.graph, &lg.student), lg.teacher_logits, lg.teacher_probs))
        };
        #[cfg(feature = "parallel")]
        let results: Vec<_> = {
            use rayon::prelude::*;
            batch.par_iter().map(one).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<_> = batch.iter().map(one).collect();

        // reduce in batch order so the result does not depend on scheduling
        let mut grads = NetGrads::zeros_like(&self.student);
        let mut loss = 0.0;
        let mut logits = Vec::new();
        let mut probs = Vec::new();
        for r in results {
            let (l, g, tl, tp) = r.map_err(|e| match e {
                Error::Numerical { detail, .. } => Error::Numerical { step: self.step, detail },
                e => e,
            })?;
            loss += l;
            grads.add(&g);
            logits.extend(tl);
            probs.extend(tp);
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() || grads.vit.iter().chain(&grads.head).flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical {
                step: self.step,
                detail: format!("distillation loss is {loss}"),
            });
        }
        grads.scale(1.0 / n);

        self.student.vit.params_mut().adamw_step(&mut self.opt_vit, &grads.vit, lr)?;
        self.student.head.params_mut().adamw_step(&mut self.opt_head, &grads.head, lr)?;
        self.teacher.ema_toward(&self.student, lambda)?;
        if self.config.centering {
            update_center(&mut self.center, &logits, self.config.center_momentum)?;
        }

        let k = self.center.len();
        let mut mean = vec![0.0; k];
        for p in &probs {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x / probs.len() as f64;
            }
        }
        let record = StepRecord {
            step: self.step,
            loss,
            teacher_entropy: entropy(&mean),
            sample_entropy: probs.iter().map(|p| entropy(p)).sum::<f64>() / probs.len() as f64,
            lr,
            tau_t: teacher_temp,
            lambda,
        };
        self.step += 1;
        Ok(record)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: DinoState,
    pub trace: Vec<StepRecord>,
    /// Indices of the tiles actually used.
    pub used_tiles: Vec<usize>,
}

/// Runs the full schedule over `tiles`. `on_step` sees each trace row as it is produced.
pub fn pretrain(
    tiles: &[RgbImage],
    vit_config: VitConfig,
    config: DinoConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<PretrainOutcome> {
    if tiles.is_empty() {
        return Err(Error::Validation("pre-training needs at least one tile".into()));
    }
    let size = vit_config.image_size;
    if let Some(t) = tiles.iter().find(|t| t.width() as usize != size || t.height() as usize != size) {
        return Err(Error::dim(
            "pretrain",
            &[t.height() as usize, t.width() as usize],
            &[size, size],
        ));
    }
    let mut state = DinoState::new(vit_config, config, seed)?;

    let mut used: Vec<usize> = (0..tiles.len()).collect();
    if let Some(cap) = config.max_tiles.filter(|&c| c < tiles.len()) {
        used.shuffle(&mut seeded(seed, 5));
        used.truncate(cap);
        used.sort_unstable();
    }

    let steps_per_epoch = used.len().div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let warmup = config.warmup_epochs * steps_per_epoch;
    let mut trace = Vec::with_capacity(total);
    let mut order = used.clone();
    for epoch in 0..config.epochs {
        order.shuffle(&mut seeded(seed, 1000 + epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let step = state.step;
            let batch: Vec<ViewSet> = chunk
                .iter()
                .map(|&i| {
                    let view_seed = mix_seed(seed, (epoch as u64) << 32 | i as u64);
                    make_views(&tiles[i], i, view_seed, size, &config.augment)
                })
                .collect();
            let lr = lr_at(step, total, warmup, config.lr_min, config.lr_max)?;
            let tau_t = teacher_temp_at(step, warmup, config.teacher_temp_warmup, config.teacher_temp);
            let lambda = ema_lambda_at(step, total, config.ema_start);
            let record = state.train_step(&batch, lr, tau_t, lambda)?;
            log::debug!(
                "step {step}: loss {:.4} entropy {:.4} lr {lr:.2e}",
                record.loss,
                record.teacher_entropy
            );
            on_step(&record);
            trace.push(record);
        }
    }
    Ok(PretrainOutcome {
        state,
        trace,
        used_tiles: used,
    })
}
