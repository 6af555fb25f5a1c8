//! The classifier: stem, multi-scale feature extraction (MFE), feature
//! reweighting (FR) with its temporal/channel score submodules and score
//! fusion, and the prediction head, plus the ablation switches.

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, DepthwiseConv2d, Dropout, Linear, SeparableConv2d};
use crate::tensor::{
    adaptive_avg_pool, concat_channels, global_avg_pool, pair_softmax, slice_channels,
    upsample_nearest, Mode, Padding, Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. The electrode count `electrodes`, trial
/// length `trial_length`, and class count `classes` describe the data; the
/// rest shape the network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub electrodes: usize,
    pub trial_length: usize,
    pub classes: usize,
    pub stem_filters: usize,
    pub stem_temporal_kernel: usize,
    pub stem_depth_multiplier: usize,
    /// Fixed temporal length after the stem's adaptive average pool. Being
    /// absolute (not derived from the incoming trial) is what lets a trained
    /// model accept trials of any length.
    pub stem_pool: usize,
    pub mfe_branch_kernels: Vec<usize>,
    pub mfe_filters_per_branch: usize,
    /// Feature-map channel count P inside the FR module.
    pub fr_channels: usize,
    /// Temporal scale factor (number of pooling scales in the temporal
    /// score module).
    pub temporal_scale_factor: usize,
    /// Base of the scale schedule s_i = scale_base * 2^(i-1).
    pub scale_base: usize,
    /// Channel split factor (number of groups in the channel score module).
    pub channel_split_factor: usize,
    pub prediction_kernel: usize,
    pub dropout_p: f64,
    pub elu_alpha: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            electrodes: 22,
            trial_length: 256,
            classes: 4,
            stem_filters: 8,
            stem_temporal_kernel: 64,
            stem_depth_multiplier: 2,
            stem_pool: 64,
            mfe_branch_kernels: vec![7, 9, 11],
            mfe_filters_per_branch: 8,
            fr_channels: 32,
            temporal_scale_factor: 4,
            scale_base: 2,
            channel_split_factor: 4,
            prediction_kernel: 16,
            dropout_p: 0.25,
            elu_alpha: 1.0,
        }
    }
}

impl NetworkConfig {
    /// The pooling scale set {1, s_1, ..., s_{beta-1}} with
    /// s_i = scale_base * 2^(i-1).
    pub fn scales(&self) -> Vec<usize> {
        let mut s = vec![1];
        for i in 1..self.temporal_scale_factor {
            s.push(self.scale_base * (1 << (i - 1)));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.temporal_scale_factor < 1 {
            return fail("temporal_scale_factor must be >= 1".into());
        }
        if self.channel_split_factor < 1 {
            return fail("channel_split_factor must be >= 1".into());
        }
        if self.scale_base < 1 {
            return fail("scale_base must be >= 1".into());
        }
        if self.fr_channels % self.channel_split_factor != 0 {
            return fail(format!(
                "fr_channels {} not divisible by channel_split_factor {}",
                self.fr_channels, self.channel_split_factor
            ));
        }
        if (self.fr_channels / self.channel_split_factor) % 2 != 0 {
            return fail(format!(
                "per-group channel count {} must be even (groups are halved)",
                self.fr_channels / self.channel_split_factor
            ));
        }
        if self.trial_length < self.stem_temporal_kernel {
            return fail(format!(
                "trial_length {} shorter than stem_temporal_kernel {}",
                self.trial_length, self.stem_temporal_kernel
            ));
        }
        if self.stem_pool < 1 || self.stem_pool > self.trial_length {
            return fail(format!(
                "stem_pool {} out of range for trial_length {}",
                self.stem_pool, self.trial_length
            ));
        }
        if self.stem_pool % 2 != 0 {
            return fail(format!("stem_pool {} must be even", self.stem_pool));
        }
        for &s in &self.scales() {
            if s > self.stem_pool || self.stem_pool % s != 0 {
                return fail(format!(
                    "temporal length {} not divisible by pooling scale {}",
                    self.stem_pool, s
                ));
            }
        }
        if self.mfe_branch_kernels.is_empty() {
            return fail("mfe_branch_kernels must not be empty".into());
        }
        for &k in &self.mfe_branch_kernels {
            if k < 1 {
                return fail("mfe branch kernel must be >= 1".into());
            }
            if k > self.stem_pool {
                return fail(format!(
                    "mfe branch kernel {} exceeds temporal length {}",
                    k, self.stem_pool
                ));
            }
        }
        if self.stem_filters < 1
            || self.stem_depth_multiplier < 1
            || self.mfe_filters_per_branch < 1
            || self.fr_channels < 1
            || self.prediction_kernel < 1
        {
            return fail("filter counts and kernel sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must be in [0,1), got {}", self.dropout_p));
        }
        Ok(())
    }

    pub fn stem_out_channels(&self) -> usize {
        self.stem_filters * self.stem_depth_multiplier
    }

    /// Branch count + one pooled branch, each projected to
    /// `mfe_filters_per_branch` channels.
    pub fn mfe_out_channels(&self) -> usize {
        (self.mfe_branch_kernels.len() + 1) * self.mfe_filters_per_branch
    }
}

/// Which parts of the network are active. Mirrors the ablation variants:
/// removing a whole module (MFE or FR) or removing one/both score paths
/// inside FR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    WithoutMfe,
    WithoutFr,
    TfsOnly,
    CfsOnly,
    NoScores,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::WithoutMfe,
        Ablation::WithoutFr,
        Ablation::TfsOnly,
        Ablation::CfsOnly,
        Ablation::NoScores,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutMfe => "wo_mfe",
            Ablation::WithoutFr => "wo_fr",
            Ablation::TfsOnly => "tfs_only",
            Ablation::CfsOnly => "cfs_only",
            Ablation::NoScores => "no_scores",
        }
    }

    pub fn from_name(name: &str) -> Result<Ablation> {
        Ablation::ALL
            .iter()
            .copied()
            .find(|a| a.name() == name)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown ablation '{}', expected one of {:?}",
                    name,
                    Ablation::ALL.iter().map(|a| a.name()).collect::<Vec<_>>()
                ))
            })
    }

    pub fn has_mfe(&self) -> bool {
        !matches!(self, Ablation::WithoutMfe)
    }

    pub fn has_fr(&self) -> bool {
        !matches!(self, Ablation::WithoutFr)
    }

    pub fn has_tfs(&self) -> bool {
        matches!(self, Ablation::Full | Ablation::WithoutMfe | Ablation::TfsOnly)
    }

    pub fn has_cfs(&self) -> bool {
        matches!(self, Ablation::Full | Ablation::WithoutMfe | Ablation::CfsOnly)
    }
}

struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    dw: DepthwiseConv2d,
    dropout: Dropout,
}

struct MfeBranch {
    dw: DepthwiseConv2d,
    dropout: Dropout,
    pw: Conv2d,
}

struct Mfe {
    branches: Vec<MfeBranch>,
    pooled_pw: Conv2d,
}

struct TfsModule {
    conv_in: Conv2d,
    proj: Conv2d,
}

struct CfsModule {
    group_fc: Vec<Linear>,
    fc_mid: Linear,
    fc_out: Linear,
}

struct FrModule {
    mix: Conv2d,
    conv_f1: Conv2d,
    conv_f2: Conv2d,
    tfs: Option<TfsModule>,
    cfs: Option<CfsModule>,
}

struct Prediction {
    bn: BatchNorm2d,
    sep: SeparableConv2d,
    dropout: Dropout,
    fc: Linear,
}

/// Intermediates of one FR forward pass, kept for tests and Grad-CAM.
pub struct FrIntermediates {
    /// F: output of the mixing conv + ELU stack.
    pub mixed: Tensor,
    pub f1: Tensor,
    pub f2: Tensor,
    /// F1 + F2, the input to both score modules.
    pub f_hat: Tensor,
    /// Temporal score, (B, T).
    pub s_tfs: Option<Tensor>,
    /// Channel score, (B, P).
    pub s_cfs: Option<Tensor>,
    /// Fused temporal weight grid, (B, P, 1, T).
    pub w_tfs: Option<Tensor>,
    /// Fused channel weight grid, (B, P, 1, T).
    pub w_cfs: Option<Tensor>,
    pub output: Tensor,
}

/// Every tensor a full forward pass produces, by stage. Feeds Grad-CAM and
/// the white-box tests.
pub struct ForwardTrace {
    pub input: Tensor,
    pub stem_out: Tensor,
    pub mfe_out: Option<Tensor>,
    pub fr: Option<FrIntermediates>,
    /// Input of the prediction module.
    pub features: Tensor,
    pub logits: Tensor,
}

pub struct Network {
    pub config: NetworkConfig,
    pub ablation: Ablation,
    stem: Stem,
    mfe: Option<Mfe>,
    fr: Option<FrModule>,
    pred: Prediction,
}

impl Network {
    pub fn new<R: Rng>(config: NetworkConfig, ablation: Ablation, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let stem = Stem {
            conv: Conv2d::new(
                "stem.conv",
                1,
                c.stem_filters,
                (1, c.stem_temporal_kernel),
                Padding::Same,
                rng,
            ),
            bn: BatchNorm2d::new("stem.bn", c.stem_filters),
            dw: DepthwiseConv2d::new(
                "stem.dw",
                c.stem_filters,
                c.stem_depth_multiplier,
                (c.electrodes, 1),
                Padding::Valid,
                rng,
            ),
            dropout: Dropout::new(c.dropout_p),
        };
        let stem_ch = c.stem_out_channels();

        let mfe = ablation.has_mfe().then(|| {
            let branches = c
                .mfe_branch_kernels
                .iter()
                .enumerate()
                .map(|(i, &k)| MfeBranch {
                    dw: DepthwiseConv2d::new(
                        &format!("mfe.branch{i}.dw"),
                        stem_ch,
                        1,
                        (1, k),
                        Padding::Same,
                        rng,
                    ),
                    dropout: Dropout::new(c.dropout_p),
                    pw: Conv2d::new(
                        &format!("mfe.branch{i}.pw"),
                        stem_ch,
                        c.mfe_filters_per_branch,
                        (1, 1),
                        Padding::Valid,
                        rng,
                    ),
                })
                .collect();
            Mfe {
                branches,
                pooled_pw: Conv2d::new(
                    "mfe.pooled.pw",
                    stem_ch,
                    c.mfe_filters_per_branch,
                    (1, 1),
                    Padding::Valid,
                    rng,
                ),
            }
        });

        let fr_in_ch = if ablation.has_mfe() {
            c.mfe_out_channels()
        } else {
            stem_ch
        };
        let p = c.fr_channels;
        let fr = ablation.has_fr().then(|| {
            let tfs = ablation.has_tfs().then(|| TfsModule {
                conv_in: Conv2d::new("fr.tfs.conv_in", p, p, (1, 3), Padding::Same, rng),
                proj: Conv2d::new(
                    "fr.tfs.proj",
                    p * c.temporal_scale_factor,
                    1,
                    (1, 1),
                    Padding::Valid,
                    rng,
                ),
            });
            let cfs = ablation.has_cfs().then(|| {
                let group = p / c.channel_split_factor;
                let group_fc = (0..c.channel_split_factor)
                    .map(|i| Linear::new(&format!("fr.cfs.group{i}"), group, group / 2, rng))
                    .collect();
                CfsModule {
                    group_fc,
                    fc_mid: Linear::new("fr.cfs.fc_mid", p / 2, p / 2, rng),
                    fc_out: Linear::new("fr.cfs.fc_out", p / 2, p, rng),
                }
            });
            FrModule {
                mix: Conv2d::new("fr.mix", fr_in_ch, p, (1, 1), Padding::Valid, rng),
                conv_f1: Conv2d::new("fr.conv_f1", p, p, (1, 3), Padding::Same, rng),
                conv_f2: Conv2d::new("fr.conv_f2", p, p, (1, 1), Padding::Valid, rng),
                tfs,
                cfs,
            }
        });

        let pred_in_ch = if ablation.has_fr() { p } else { fr_in_ch };
        let pred = Prediction {
            bn: BatchNorm2d::new("pred.bn", pred_in_ch),
            sep: SeparableConv2d::new(
                "pred.sep",
                pred_in_ch,
                pred_in_ch,
                (1, c.prediction_kernel),
                Padding::Same,
                rng,
            ),
            dropout: Dropout::new(c.dropout_p),
            fc: Linear::new("pred.fc", pred_in_ch, c.classes, rng),
        };

        Ok(Network {
            config,
            ablation,
            stem,
            mfe,
            fr,
            pred,
        })
    }

    fn stem_forward<R: Rng>(&self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.config.electrodes {
            return Err(Error::Geometry(format!(
                "stem: expected (B,1,{},W) input, got {:?}",
                self.config.electrodes, s
            )));
        }
        if s[3] < self.config.stem_temporal_kernel {
            return Err(Error::InvalidConfig(format!(
                "stem: trial length {} shorter than temporal kernel {}",
                s[3], self.config.stem_temporal_kernel
            )));
        }
        let x = self.stem.conv.forward(x)?;
        let x = self.stem.bn.forward(&x, mode)?;
        let x = self.stem.dw.forward(&x)?; // collapses electrode height to 1
        let x = x.elu(self.config.elu_alpha);
        let x = self.stem.dropout.forward(&x, mode, rng)?;
        adaptive_avg_pool(&x, (1, self.config.stem_pool))
    }

    fn mfe_forward<R: Rng>(&self, f: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let mfe = self.mfe.as_ref().expect("mfe_forward on bypassed MFE");
        let mut outs = Vec::with_capacity(mfe.branches.len() + 1);
        for branch in &mfe.branches {
            let y = branch.dw.forward(f)?;
            let y = branch.dropout.forward(&y, mode, rng)?;
            outs.push(branch.pw.forward(&y)?);
        }
        // Pooled branch: halve the temporal axis, restore it, then project.
        let t = f.shape()[3];
        let pooled = adaptive_avg_pool(f, (1, t / 2))?;
        let restored = upsample_nearest(&pooled, (1, 2))?;
        outs.push(mfe.pooled_pw.forward(&restored)?);
        concat_channels(&outs)
    }

    /// Temporal feature score: multi-scale pooled features concatenated with
    /// the unscaled skip, projected down to one value per time step.
    fn tfs_score(&self, f_hat: &Tensor) -> Result<Tensor> {
        let fr = self.fr.as_ref().unwrap();
        let tfs = fr.tfs.as_ref().unwrap();
        let t = f_hat.shape()[3];
        let f_c = tfs.conv_in.forward(f_hat)?.elu(self.config.elu_alpha);
        let mut features = Vec::new();
        for &s in self.config.scales().iter().skip(1) {
            let pooled = adaptive_avg_pool(&f_c, (1, t / s))?;
            features.push(upsample_nearest(&pooled, (1, s))?);
        }
        features.push(f_c);
        let concat = concat_channels(&features)?;
        let score = tfs.proj.forward(&concat)?; // (B,1,1,T)
        let b = score.shape()[0];
        score.reshape(&[b, t])
    }

    /// Channel feature score: squeeze, split into groups, halve each group
    /// through its own fully connected layer, then project back to P.
    fn cfs_score(&self, f_hat: &Tensor) -> Result<Tensor> {
        let fr = self.fr.as_ref().unwrap();
        let cfs = fr.cfs.as_ref().unwrap();
        let p = self.config.fr_channels;
        let gamma = self.config.channel_split_factor;
        let group = p / gamma;
        let b = f_hat.shape()[0];
        let squeezed = global_avg_pool(f_hat)?; // (B,P)
        let as4 = squeezed.reshape(&[b, p, 1, 1])?;
        let mut halves = Vec::with_capacity(gamma);
        for (i, fc) in cfs.group_fc.iter().enumerate() {
            let part = slice_channels(&as4, i * group, group)?.reshape(&[b, group])?;
            let half = fc.forward(&part)?.relu();
            halves.push(half.reshape(&[b, group / 2, 1, 1])?);
        }
        let concat = concat_channels(&halves)?.reshape(&[b, p / 2])?;
        let mid = cfs.fc_mid.forward(&concat)?.relu();
        cfs.fc_out.forward(&mid)
    }

    /// FR forward pass. Returns the reweighted features and all
    /// intermediates.
    fn fr_forward(&self, f_in: &Tensor) -> Result<FrIntermediates> {
        let fr = self.fr.as_ref().expect("fr_forward on bypassed FR");
        let mixed = fr.mix.forward(f_in)?.elu(self.config.elu_alpha);
        let f1 = fr.conv_f1.forward(&mixed)?;
        let f2 = fr.conv_f2.forward(&mixed)?;
        let f_hat = f1.add(&f2)?;
        let (b, p, t) = {
            let s = f_hat.shape();
            (s[0], s[1], s[3])
        };

        let s_tfs = fr.tfs.as_ref().map(|_| self.tfs_score(&f_hat)).transpose()?;
        let s_cfs = fr.cfs.as_ref().map(|_| self.cfs_score(&f_hat)).transpose()?;

        // Missing scores are treated as zero, which degenerates the pairwise
        // softmax to a sigmoid of the remaining score.
        let (w_tfs, w_cfs, output) = match (&s_tfs, &s_cfs) {
            (Some(st), Some(sc)) => {
                let w_t = pair_softmax(st, sc)?;
                let w_c = w_t.one_minus();
                let out = w_t.mul(&f1)?.add(&w_c.mul(&f2)?)?;
                (Some(w_t), Some(w_c), out)
            }
            (Some(st), None) => {
                let w_t = pair_softmax(st, &Tensor::zeros(&[b, p]))?;
                let out = w_t.mul(&f1)?.add(&f2)?;
                (Some(w_t), None, out)
            }
            (None, Some(sc)) => {
                let w_c = pair_softmax(&Tensor::zeros(&[b, t]), sc)?.one_minus();
                let out = f1.add(&w_c.mul(&f2)?)?;
                (None, Some(w_c), out)
            }
            (None, None) => (None, None, f1.add(&f2)?),
        };

        Ok(FrIntermediates {
            mixed,
            f1,
            f2,
            f_hat,
            s_tfs,
            s_cfs,
            w_tfs,
            w_cfs,
            output,
        })
    }

    fn prediction_forward<R: Rng>(
        &self,
        f: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor> {
        let x = self.pred.bn.forward(f, mode)?;
        let x = x.elu(self.config.elu_alpha);
        let x = self.pred.sep.forward(&x)?;
        let x = self.pred.dropout.forward(&x, mode, rng)?;
        let x = global_avg_pool(&x)?;
        self.pred.fc.forward(&x)
    }

    /// Full forward pass returning logits only.
    pub fn forward<R: Rng>(&self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        Ok(self.forward_trace(x, mode, rng)?.logits)
    }

    /// Full forward pass keeping every stage's output.
    pub fn forward_trace<R: Rng>(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let stem_out = self.stem_forward(x, mode, rng)?;
        let mfe_out = if self.mfe.is_some() {
            Some(self.mfe_forward(&stem_out, mode, rng)?)
        } else {
            None
        };
        let pre_fr = mfe_out.as_ref().unwrap_or(&stem_out).clone();
        let fr = if self.fr.is_some() {
            Some(self.fr_forward(&pre_fr)?)
        } else {
            None
        };
        let features = fr.as_ref().map(|i| i.output.clone()).unwrap_or(pre_fr);
        let logits = self.prediction_forward(&features, mode, rng)?;
        Ok(ForwardTrace {
            input: x.clone(),
            stem_out,
            mfe_out,
            fr,
            features,
            logits,
        })
    }

    /// Trainable parameters, sorted lexicographically by name.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.stem.conv.params(&mut out);
        self.stem.bn.params(&mut out);
        self.stem.dw.params(&mut out);
        if let Some(mfe) = &self.mfe {
            for b in &mfe.branches {
                b.dw.params(&mut out);
                b.pw.params(&mut out);
            }
            mfe.pooled_pw.params(&mut out);
        }
        if let Some(fr) = &self.fr {
            fr.mix.params(&mut out);
            fr.conv_f1.params(&mut out);
            fr.conv_f2.params(&mut out);
            if let Some(tfs) = &fr.tfs {
                tfs.conv_in.params(&mut out);
                tfs.proj.params(&mut out);
            }
            if let Some(cfs) = &fr.cfs {
                for fc in &cfs.group_fc {
                    fc.params(&mut out);
                }
                cfs.fc_mid.params(&mut out);
                cfs.fc_out.params(&mut out);
            }
        }
        self.pred.bn.params(&mut out);
        self.pred.sep.params(&mut out);
        self.pred.fc.params(&mut out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        let mut v = vec![&self.stem.bn, &self.pred.bn];
        v.sort_by(|a, b| a.name.cmp(&b.name));
        v
    }

    /// All persistent state: parameters plus batch-norm running statistics,
    /// sorted by name. This is exactly what a checkpoint stores.
    pub fn state_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape(), t.data_clone()))
            .collect();
        for bn in self.bn_layers() {
            let mut stats = Vec::new();
            bn.state(&mut stats);
            for (n, v) in stats {
                let len = v.len();
                out.push((n, vec![len], v));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Restore parameters and running statistics from checkpoint entries.
    /// Every entry must match a known name and shape.
    pub fn load_state(&self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let params = self.parameters();
        for (name, shape, values) in entries {
            if let Some((_, t)) = params.iter().find(|(n, _)| n == name) {
                if &t.shape() != shape {
                    return Err(Error::Content(format!(
                        "checkpoint entry '{}' has shape {:?}, expected {:?}",
                        name,
                        shape,
                        t.shape()
                    )));
                }
                t.set_data(values)?;
            } else if !self.bn_layers().iter().any(|bn| bn.load_state(name, values)) {
                return Err(Error::Content(format!(
                    "checkpoint entry '{}' does not match any network state",
                    name
                )));
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.parameters() {
            t.zero_grad();
        }
    }
}
