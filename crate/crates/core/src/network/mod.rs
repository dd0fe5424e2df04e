//! The trainable stack: spatial module, temporal relation module, classifier
//! and three gradient-reversal domain discriminators.
//!
//! Data flow for a batch of `B` clips with `T` frames of width `D`:
//!
//! ```text
//! x [B, T*D] -> reshape [B*T, D] -> spatial MLP -> t [B*T, Fs]
//! t -> reshape [B, T*Fs] -> for every relation order n and every start s:
//!        window = t[:, s*Fs .. (s+n)*Fs]  -> relation_n MLP -> [B, Fr]
//! d = sum of all window outputs            [B, Fr]
//! y = softmax(classifier(d))               [B, K]
//! ```
//!
//! Every MLP is `Linear -> relu -> Linear`; the classifier is a single affine
//! layer. Each discriminator sees its input through a gradient reversal
//! layer and emits a 2-way softmax over {source, target}.
//!
//! With `Hs, Fs, Hr, Fr, Hd` the spatial hidden/output, relation hidden/output
//! and discriminator hidden widths, the parameter count is
//!
//! ```text
//!   (D*Hs + Hs + Hs*Fs + Fs)                  spatial
//! + sum_n (n*Fs*Hr + Hr + Hr*Fr + Fr)         relation, one per order n
//! + (Fr*K + K)                                classifier
//! + (Fs*Hd + Hd + 2*Hd + 2)                   spatial discriminator
//! + 2 * (Fr*Hd + Hd + 2*Hd + 2)               relation + temporal discriminators
//! ```

mod checkpoint;

pub use checkpoint::{decode_fvck, encode_fvck, load_checkpoint, save_checkpoint, FVCK_MAGIC, FVCK_VERSION};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{seeded, uniform};

/// How the reversal strength evolves over training progress `p ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrlSchedule {
    Constant,
    /// `2 / (1 + exp(-10 p)) - 1`, rising from 0 to ~1.
    Ramp,
}

impl GrlSchedule {
    pub fn factor(self, progress: f64) -> f64 {
        match self {
            GrlSchedule::Constant => 1.0,
            GrlSchedule::Ramp => 2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0,
        }
    }
}

/// Widths and relation orders; the data-dependent dimensions live in
/// [`NetworkConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub spatial_hidden: usize,
    pub spatial_out: usize,
    pub relation_hidden: usize,
    pub relation_out: usize,
    pub disc_hidden: usize,
    pub relation_orders: Vec<usize>,
    pub grl_schedule: GrlSchedule,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            spatial_hidden: 64,
            spatial_out: 64,
            relation_hidden: 64,
            relation_out: 64,
            disc_hidden: 64,
            // one window over all T = 5 frames: the paper's "time-ordered
            // sets of 5 frame representations"
            relation_orders: vec![5],
            grl_schedule: GrlSchedule::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub frames: usize,
    pub num_classes: usize,
    pub arch: ArchConfig,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, frames: usize, num_classes: usize, arch: ArchConfig) -> Result<Self> {
        let cfg = NetworkConfig {
            input_dim,
            frames,
            num_classes,
            arch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if self.input_dim == 0 || self.num_classes == 0 || self.frames < 2 {
            return Err(Error::config(format!(
                "invalid network dims D={} T={} K={}",
                self.input_dim, self.frames, self.num_classes
            )));
        }
        let widths = [a.spatial_hidden, a.spatial_out, a.relation_hidden, a.relation_out, a.disc_hidden];
        if widths.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if a.relation_orders.is_empty() {
            return Err(Error::config("relation orders must be non-empty"));
        }
        for (i, &n) in a.relation_orders.iter().enumerate() {
            if n < 2 || n > self.frames {
                return Err(Error::config(format!(
                    "relation order {n} outside [2, {}]",
                    self.frames
                )));
            }
            if a.relation_orders[..i].contains(&n) {
                return Err(Error::config(format!("duplicate relation order {n}")));
            }
        }
        Ok(())
    }

    /// Number of contiguous relation windows per clip.
    pub fn window_count(&self) -> usize {
        self.arch
            .relation_orders
            .iter()
            .map(|n| self.frames - n + 1)
            .sum()
    }

    /// Closed-form parameter count (see module docs).
    pub fn parameter_count(&self) -> usize {
        let a = &self.arch;
        let (d, k) = (self.input_dim, self.num_classes);
        let (hs, fs, hr, fr, hd) = (a.spatial_hidden, a.spatial_out, a.relation_hidden, a.relation_out, a.disc_hidden);
        let spatial = d * hs + hs + hs * fs + fs;
        let relation: usize = a
            .relation_orders
            .iter()
            .map(|n| n * fs * hr + hr + hr * fr + fr)
            .sum();
        let classifier = fr * k + k;
        let disc = |i: usize| i * hd + hd + 2 * hd + 2;
        spatial + relation + classifier + disc(fs) + 2 * disc(fr)
    }

    fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let a = &self.arch;
        let mut layers = Vec::new();
        let mut mlp = |name: &str, i: usize, h: usize, o: usize| {
            layers.push((format!("{name}.hidden"), i, h));
            layers.push((format!("{name}.out"), h, o));
        };
        mlp("spatial", self.input_dim, a.spatial_hidden, a.spatial_out);
        for &n in &a.relation_orders {
            mlp(&format!("relation{n}"), n * a.spatial_out, a.relation_hidden, a.relation_out);
        }
        mlp("disc_spatial", a.spatial_out, a.disc_hidden, 2);
        mlp("disc_relation", a.relation_out, a.disc_hidden, 2);
        mlp("disc_temporal", a.relation_out, a.disc_hidden, 2);
        layers.push(("classifier".into(), a.relation_out, self.num_classes));
        layers
    }
}

/// Parameters of the whole stack in a fixed canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Layer lookups into the canonical parameter order.
struct Layout {
    spatial: Mlp,
    relations: Vec<(usize, Mlp)>,
    disc_spatial: Mlp,
    disc_relation: Mlp,
    disc_temporal: Mlp,
    classifier: Linear,
}

#[derive(Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy)]
struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Layout {
    fn new(cfg: &NetworkConfig) -> Self {
        let lin = |i: usize| Linear {
            weight: 2 * i,
            bias: 2 * i + 1,
        };
        let mlp = |i: usize| Mlp {
            hidden: lin(i),
            out: lin(i + 1),
        };
        let orders = &cfg.arch.relation_orders;
        let r = orders.len();
        Layout {
            spatial: mlp(0),
            relations: orders.iter().enumerate().map(|(j, &n)| (n, mlp(2 + 2 * j))).collect(),
            disc_spatial: mlp(2 + 2 * r),
            disc_relation: mlp(4 + 2 * r),
            disc_temporal: mlp(6 + 2 * r),
            classifier: lin(8 + 2 * r),
        }
    }
}

/// Gradient reversal: identity forward, backward scales by `-beta`.
pub fn grl(x: Var<'_>, beta: f64) -> Var<'_> {
    assert!(beta >= 0.0, "GRL strength must be non-negative, got {beta}");
    x.scale_grad(-beta)
}

/// Network parameters placed on a tape.
pub struct BoundParams<'t> {
    pub vars: Vec<Var<'t>>,
}

/// Everything a forward pass produces. Relation rows are window-major:
/// row `w * batch + b` belongs to window `w` of clip `b`.
pub struct BatchOutputs<'t> {
    pub batch: usize,
    pub frames: usize,
    pub windows: usize,
    pub spatial_features: Var<'t>,
    pub relation_features: Var<'t>,
    pub video_features: Var<'t>,
    pub logits: Var<'t>,
    pub class_probs: Var<'t>,
    pub spatial_domain: Var<'t>,
    pub relation_domain: Var<'t>,
    pub temporal_domain: Var<'t>,
    /// Log-softmax twins of the four distributions above; the training
    /// losses read these so that saturated heads keep their gradient.
    pub class_log_probs: Var<'t>,
    pub spatial_domain_log: Var<'t>,
    pub relation_domain_log: Var<'t>,
    pub temporal_domain_log: Var<'t>,
}

struct Features<'t> {
    spatial: Var<'t>,
    windows: Vec<Var<'t>>,
    video: Var<'t>,
}

impl Network {
    /// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, fan_in, fan_out) in config.layer_shapes() {
            let a = (6.0 / fan_in as f64).sqrt();
            let w = Tensor::from_fn(vec![fan_in, fan_out], |_| a * (2.0 * uniform(&mut rng) - 1.0));
            names.push(format!("{name}.weight"));
            params.push(w);
            names.push(format!("{name}.bias"));
            params.push(Tensor::zeros(vec![fan_out]));
        }
        Ok(Network {
            config: config.clone(),
            names,
            params,
        })
    }

    /// Rebuilds a network from named tensors, validating every shape.
    pub fn from_named(config: NetworkConfig, named: Vec<(String, Tensor)>) -> Result<Network> {
        config.validate()?;
        let template = Network::init(&config, 0)?;
        if named.len() != template.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want)) in named.into_iter().zip(template.named()) {
            if name != want_name || t.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} {:?} does not match expected {want_name} {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            params.push(t);
        }
        Ok(Network {
            params,
            ..template
        })
    }

    /// Infers the configuration from canonical parameter names and shapes.
    pub fn infer_config(named: &[(String, Tensor)], frames: usize) -> Result<NetworkConfig> {
        let find = |name: &str| -> Result<&Tensor> {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let dims = |name: &str| -> Result<(usize, usize)> {
            let t = find(name)?;
            match t.shape() {
                [a, b] => Ok((*a, *b)),
                s => Err(Error::Format(format!("{name} has rank {} not 2", s.len()))),
            }
        };
        let (d, hs) = dims("spatial.hidden.weight")?;
        let (_, fs) = dims("spatial.out.weight")?;
        let (fr, k) = dims("classifier.weight")?;
        let (_, hd) = dims("disc_spatial.hidden.weight")?;
        let mut orders = Vec::new();
        let mut hr = 0;
        for (name, _) in named {
            if let Some(rest) = name.strip_prefix("relation") {
                if let Some(n) = rest.strip_suffix(".hidden.weight") {
                    let n: usize = n
                        .parse()
                        .map_err(|_| Error::Format(format!("bad relation tensor name {name}")))?;
                    hr = dims(name)?.1;
                    orders.push(n);
                }
            }
        }
        let arch = ArchConfig {
            spatial_hidden: hs,
            spatial_out: fs,
            relation_hidden: hr,
            relation_out: fr,
            disc_hidden: hd,
            relation_orders: orders,
            grl_schedule: GrlSchedule::Constant,
        };
        NetworkConfig::new(d, frames, k, arch)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Zeroes the classifier so that every prediction is uniform.
    pub fn zero_classifier(&mut self) {
        let c = Layout::new(&self.config).classifier;
        for i in [c.weight, c.bias] {
            self.params[i].data_mut().fill(0.0);
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn linear<'t>(&self, p: &BoundParams<'t>, l: Linear, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.vars[l.weight])?.add(p.vars[l.bias])
    }

    fn mlp<'t>(&self, p: &BoundParams<'t>, m: Mlp, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.linear(p, m.hidden, x)?.relu();
        self.linear(p, m.out, h)
    }

    fn features<'t>(&self, p: &BoundParams<'t>, layout: &Layout, x: Var<'t>) -> Result<Features<'t>> {
        let cfg = &self.config;
        let (t, d) = (cfg.frames, cfg.input_dim);
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != t * d {
            return Err(Error::config(format!(
                "batch shape {shape:?} does not match network input [B, {}]",
                t * d
            )));
        }
        let b = shape[0];
        let fs = cfg.arch.spatial_out;
        let frames = x.reshape(vec![b * t, d])?;
        let spatial = self.mlp(p, layout.spatial, frames)?;
        let per_clip = spatial.reshape(vec![b, t * fs])?;
        let mut windows = Vec::with_capacity(cfg.window_count());
        for &(n, mlp) in &layout.relations {
            for s in 0..=t - n {
                let w = per_clip.slice(1, s * fs, (s + n) * fs)?;
                windows.push(self.mlp(p, mlp, w)?);
            }
        }
        let mut video = windows[0];
        for w in &windows[1..] {
            video = video.add(*w)?;
        }
        Ok(Features {
            spatial,
            windows,
            video,
        })
    }

    /// Class distribution only; the discriminators are not evaluated.
    pub fn classify<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.class_logits(p, x)?.softmax())
    }

    /// Class log-distribution (log-softmax of the classifier output).
    pub fn classify_log<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.class_logits(p, x)?.log_softmax())
    }

    fn class_logits<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let layout = Layout::new(&self.config);
        let f = self.features(p, &layout, x)?;
        self.linear(p, layout.classifier, f.video)
    }

    /// Full pass including all three domain discriminators behind GRL(`beta`).
    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>, beta: f64) -> Result<BatchOutputs<'t>> {
        if !(beta >= 0.0) {
            return Err(Error::config(format!("GRL strength must be >= 0, got {beta}")));
        }
        let layout = Layout::new(&self.config);
        let f = self.features(p, &layout, x)?;
        let logits = self.linear(p, layout.classifier, f.video)?;
        let class_probs = logits.softmax();
        let relation_features = Var::concat(&f.windows, 0)?;
        let disc = |m: Mlp, v: Var<'t>| -> Result<Var<'t>> { self.mlp(p, m, grl(v, beta)) };
        let spatial = disc(layout.disc_spatial, f.spatial)?;
        let relation = disc(layout.disc_relation, relation_features)?;
        let temporal = disc(layout.disc_temporal, f.video)?;
        Ok(BatchOutputs {
            batch: x.shape()[0],
            frames: self.config.frames,
            windows: f.windows.len(),
            spatial_domain: spatial.softmax(),
            relation_domain: relation.softmax(),
            temporal_domain: temporal.softmax(),
            class_log_probs: logits.log_softmax(),
            spatial_domain_log: spatial.log_softmax(),
            relation_domain_log: relation.log_softmax(),
            temporal_domain_log: temporal.log_softmax(),
            spatial_features: f.spatial,
            relation_features,
            video_features: f.video,
            logits,
            class_probs,
        })
    }

    /// Class distributions for a batch without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let probs = self.classify(&p, tape.constant(x.clone()))?;
        Ok((*probs.value()).clone())
    }

    /// Copies gradient tensors for every parameter out of `grads`, in
    /// canonical order.
    pub fn collect_grads(&self, p: &BoundParams<'_>, grads: &crate::autodiff::Gradients) -> Vec<Tensor> {
        p.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(orders: Vec<usize>) -> NetworkConfig {
        NetworkConfig::new(
            3,
            5,
            4,
            ArchConfig {
                spatial_hidden: 6,
                spatial_out: 5,
                relation_hidden: 7,
                relation_out: 4,
                disc_hidden: 3,
                relation_orders: orders,
                grl_schedule: GrlSchedule::Constant,
            },
        )
        .unwrap()
    }

    fn batch(b: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::from_fn(vec![b, 15], |_| crate::rng::normal(&mut rng))
    }

    #[test]
    fn window_counts() {
        assert_eq!(cfg(vec![5]).window_count(), 1);
        assert_eq!(cfg(vec![2, 3, 4, 5]).window_count(), 10);
    }

    #[test]
    fn invalid_orders_rejected() {
        let mut c = cfg(vec![2]);
        c.arch.relation_orders = vec![6];
        assert!(c.validate().is_err());
        c.arch.relation_orders = vec![];
        assert!(c.validate().is_err());
        c.arch.relation_orders = vec![1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_tensors() {
        for orders in [vec![5], vec![2, 3, 4, 5], vec![3, 2]] {
            let c = cfg(orders);
            let net = Network::init(&c, 1).unwrap();
            let summed: usize = net.params().iter().map(Tensor::len).sum();
            assert_eq!(summed, c.parameter_count());
        }
        // hand count for the default-width network on D=16, T=5, K=4, orders {2..5}
        let arch = ArchConfig {
            relation_orders: vec![2, 3, 4, 5],
            ..ArchConfig::default()
        };
        let big = NetworkConfig::new(16, 5, 4, arch).unwrap();
        let spatial = 16 * 64 + 64 + 64 * 64 + 64;
        let relation = (2 + 3 + 4 + 5) * 64 * 64 + 4 * (64 + 64 * 64 + 64);
        let classifier = 64 * 4 + 4;
        let discs = 3 * (64 * 64 + 64 + 128 + 2);
        assert_eq!(big.parameter_count(), spatial + relation + classifier + discs);
    }

    #[test]
    fn init_is_seeded() {
        let c = cfg(vec![2, 3]);
        assert_eq!(Network::init(&c, 3).unwrap(), Network::init(&c, 3).unwrap());
        assert_ne!(Network::init(&c, 3).unwrap(), Network::init(&c, 4).unwrap());
        let net = Network::init(&c, 3).unwrap();
        for (name, t) in net.named() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let a = (6.0 / t.shape()[0] as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= a));
            }
        }
    }

    #[test]
    fn single_window_video_feature_is_that_window() {
        let net = Network::init(&cfg(vec![5]), 2).unwrap();
        let tape = Tape::new();
        let p = net.bind(&tape, false);
        let out = net.forward(&p, tape.constant(batch(3, 1)), 1.0).unwrap();
        assert_eq!(out.windows, 1);
        assert_eq!(*out.video_features.value(), *out.relation_features.value());
    }

    #[test]
    fn zero_classifier_gives_uniform() {
        let mut net = Network::init(&cfg(vec![2, 3, 4, 5]), 2).unwrap();
        net.zero_classifier();
        let probs = net.predict(&batch(4, 2)).unwrap();
        assert!(probs.data().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn output_distributions_are_normalized() {
        let net = Network::init(&cfg(vec![2, 3, 4, 5]), 5).unwrap();
        let tape = Tape::new();
        let p = net.bind(&tape, false);
        let out = net.forward(&p, tape.constant(batch(6, 3)), 0.5).unwrap();
        assert_eq!(out.relation_domain.shape(), vec![60, 2]);
        assert_eq!(out.spatial_domain.shape(), vec![30, 2]);
        for v in [out.class_probs, out.spatial_domain, out.relation_domain, out.temporal_domain] {
            for row in v.value().rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wrong_input_width_is_config_error() {
        let net = Network::init(&cfg(vec![2]), 0).unwrap();
        let tape = Tape::new();
        let p = net.bind(&tape, false);
        let err = net.forward(&p, tape.constant(Tensor::zeros(vec![2, 14])), 1.0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn batch_permutation_equivariance() {
        let net = Network::init(&cfg(vec![2, 3, 4, 5]), 8).unwrap();
        let x = batch(5, 4);
        let perm = [3usize, 0, 4, 1, 2];
        let mut px = Vec::new();
        for &i in &perm {
            px.extend_from_slice(x.row(i));
        }
        let px = Tensor::new(vec![5, 15], px).unwrap();
        let a = net.predict(&x).unwrap();
        let b = net.predict(&px).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(a.row(i), b.row(j));
        }
    }

    #[test]
    fn frame_order_matters() {
        let net = Network::init(&cfg(vec![2, 3]), 6).unwrap();
        let x = batch(1, 5);
        let mut rev = Vec::new();
        for t in (0..5).rev() {
            rev.extend_from_slice(&x.data()[t * 3..(t + 1) * 3]);
        }
        let tape = Tape::new();
        let p = net.bind(&tape, false);
        let a = net.forward(&p, tape.constant(x), 1.0).unwrap().video_features.value();
        let b = net
            .forward(&p, tape.constant(Tensor::new(vec![1, 15], rev).unwrap()), 1.0)
            .unwrap()
            .video_features
            .value();
        assert_ne!(*a, *b);
    }

    #[test]
    fn ramp_schedule_endpoints() {
        assert_eq!(GrlSchedule::Ramp.factor(0.0), 0.0);
        assert!((GrlSchedule::Ramp.factor(1.0) - 0.9999092).abs() < 1e-6);
        assert_eq!(GrlSchedule::Constant.factor(0.3), 1.0);
    }
}
