//! Per-modality sequence encoders, cross-modal attention and the gating
//! network that fuses modality embeddings into one vector.
//!
//! A modality encoder runs
//! `conv(3) -> conv(5) -> dense+ReLU+dropout -> self-attention -> residual -> layer norm`
//! over an `(L, d_m)` sequence and pools the result over time to a
//! `d'`-vector. The `M` modality vectors are stacked into an `(M, d')`
//! token matrix, refined by multi-head self-attention across modalities and
//! mixed by softmax gate weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const CONV1_KERNEL: usize = 3;
pub const CONV2_KERNEL: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityConfig {
    pub name: String,
    /// Features per timestep.
    pub input_dim: usize,
    /// Timesteps per sample.
    pub seq_len: usize,
}

impl ModalityConfig {
    pub fn new(name: impl Into<String>, input_dim: usize, seq_len: usize) -> Result<Self> {
        if input_dim == 0 || seq_len == 0 {
            return Err(Error::Config(format!(
                "modality needs input_dim >= 1 and seq_len >= 1, got {input_dim} and {seq_len}"
            )));
        }
        Ok(Self {
            name: name.into(),
            input_dim,
            seq_len,
        })
    }
}

/// Temporal reduction applied after the normalised residual stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Mean,
    Last,
}

impl std::str::FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pool::Mean),
            "last" => Ok(Pool::Last),
            other => Err(Error::Config(format!("pool must be mean|last, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for Pool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pool::Mean => "mean",
            Pool::Last => "last",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub pool: Pool,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            dropout: 0.1,
            pool: Pool::Mean,
            ln_eps: 1e-6,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads must divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Uniform Glorot initialisation.
pub(crate) fn glorot(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), glorot(rng, &[fan_in, fan_out], fan_in, fan_out), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), true),
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), true),
        }
    }

    /// `x W + b` for `x` of shape `(rows, fan_in)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add(y, p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, kernel: usize, cin: usize, cout: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), glorot(rng, &[kernel, cin, cout], kernel * cin, cout), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv1d(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, name: &str, dim: usize, gain: f64) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], gain), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        let n = tape.layer_norm(x, eps)?;
        let n = tape.mul(n, p.var(self.gain))?;
        tape.add(n, p.var(self.bias))
    }
}

/// Multi-head self-attention with an output projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
}

impl AttentionParams {
    /// The output projection starts at zero so the enclosing residual
    /// connection is initially the identity.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            query: Dense::new(store, rng, &format!("{name}.q"), dim, dim),
            key: Dense::new(store, rng, &format!("{name}.k"), dim, dim),
            value: Dense::new(store, rng, &format!("{name}.v"), dim, dim),
            output: Dense::zeroed(store, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// Attend over the rows of `x` (tokens x dim).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let q = self.query.forward(tape, p, x)?;
        let k = self.key.forward(tape, p, x)?;
        let v = self.value.forward(tape, p, x)?;
        let a = tape.attention(q, k, v, self.heads)?;
        self.output.forward(tape, p, a)
    }
}

/// Weights of one modality encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderParams {
    pub conv1: Conv,
    pub conv2: Conv,
    pub dense: Dense,
    pub attention: AttentionParams,
    pub norm: LayerNormParams,
    pub input_dim: usize,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, modality: &ModalityConfig, cfg: &EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        let name = format!("enc.{}", modality.name);
        Self {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), CONV1_KERNEL, modality.input_dim, d),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), CONV2_KERNEL, d, d),
            dense: Dense::new(store, rng, &format!("{name}.dense"), d, d),
            attention: AttentionParams::new(store, rng, &format!("{name}.attn"), d, cfg.heads),
            norm: LayerNormParams::new(store, &format!("{name}.norm"), d, 1.0),
            input_dim: modality.input_dim,
        }
    }
}

/// Encode one `(L, d_m)` modality sequence into a `d'`-vector.
pub fn encode_modality(tape: &mut Tape, p: &Bound, enc: &EncoderParams, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let (_, dm) = tape.value(x).dims2()?;
    if dm != enc.input_dim {
        return Err(Error::shape(
            "encode_modality",
            format!("sequence has {dm} features, encoder expects {}", enc.input_dim),
        ));
    }
    let c1 = enc.conv1.forward(tape, p, x)?;
    let c1 = tape.relu(c1)?;
    let c2 = enc.conv2.forward(tape, p, c1)?;
    let c2 = tape.relu(c2)?;
    let dense = enc.dense.forward(tape, p, c2)?;
    let dense = tape.relu(dense)?;
    let dense = tape.dropout(dense, cfg.dropout)?;
    let attended = enc.attention.forward(tape, p, dense)?;
    let res = tape.add(dense, attended)?;
    let normed = enc.norm.forward(tape, p, res, cfg.ln_eps)?;
    match cfg.pool {
        Pool::Mean => tape.mean_rows(normed),
        Pool::Last => {
            let (rows, _) = tape.value(normed).dims2()?;
            tape.row(normed, rows - 1)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossModalParams {
    pub attention: AttentionParams,
    pub norm: LayerNormParams,
}

impl CrossModalParams {
    /// The layer-norm gain starts at `1/sqrt(d')`, giving the refined tokens
    /// unit norm, so the ball projection starts away from its saturated
    /// region.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            attention: AttentionParams::new(store, rng, "cross.attn", d, cfg.heads),
            norm: LayerNormParams::new(store, "cross.norm", d, 1.0 / (d as f64).sqrt()),
        }
    }
}

/// Self-attention across the `M` modality tokens, with residual and layer norm.
pub fn cross_modal_attention(tape: &mut Tape, p: &Bound, cross: &CrossModalParams, cfg: &EncoderConfig, stack: Var) -> Result<Var> {
    let (m, _) = tape.value(stack).dims2()?;
    if m == 0 {
        return Err(Error::Empty("cross_modal_attention"));
    }
    let attended = cross.attention.forward(tape, p, stack)?;
    let res = tape.add(stack, attended)?;
    cross.norm.forward(tape, p, res, cfg.ln_eps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatingParams {
    /// `(d', 1)` score projection.
    pub w: ParamId,
}

impl GatingParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            w: store.add("gate.w", glorot(rng, &[d, 1], d, 1), true),
        }
    }
}

/// Fused representation and the gate weights that produced it.
#[derive(Clone, Copy, Debug)]
pub struct FusedEmbedding {
    /// `(d')` vector.
    pub h: Var,
    /// `(M)` probability vector.
    pub weights: Var,
}

/// `w = softmax(refined W)`, `h = Σ_m w_m refined_m`.
pub fn gate_fuse(tape: &mut Tape, p: &Bound, gating: &GatingParams, refined: Var) -> Result<FusedEmbedding> {
    let (m, d) = tape.value(refined).dims2()?;
    let scores = tape.matmul(refined, p.var(gating.w))?;
    let scores = tape.reshape(scores, &[m])?;
    let weights = tape.softmax(scores, 0)?;
    let row = tape.reshape(weights, &[1, m])?;
    let h = tape.matmul(row, refined)?;
    let h = tape.reshape(h, &[d])?;
    Ok(FusedEmbedding { h, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            heads: 2,
            dropout: 0.0,
            pool: Pool::Mean,
            ln_eps: 1e-6,
        }
    }

    fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
        for e in store.entries_mut() {
            for v in e.value.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }

    fn seq(rng: &mut impl Rng, l: usize, d: usize) -> Tensor {
        Tensor::matrix(l, d, (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_input_gives_layer_norm_bias() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, &mut rng, &ModalityConfig::new("a", 3, 120).unwrap(), &cfg);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[120, 3]));
        let h = encode_modality(&mut tape, &p, &enc, &cfg, x).unwrap();
        assert_eq!(tape.value(h).shape(), &[64]);
        assert!(tape.value(h).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, &mut rng, &ModalityConfig::new("a", 5, 120).unwrap(), &cfg);
        let x = seq(&mut rng, 120, 5);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let h = encode_modality(&mut tape, &p, &enc, &cfg, xv).unwrap();
            tape.value(h).clone()
        };
        let a = run(&x);
        assert_eq!(a.shape(), &[64]);
        assert_eq!(a, run(&x));

        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let wrong = tape.constant(Tensor::zeros(&[120, 4]));
        assert!(matches!(encode_modality(&mut tape, &p, &enc, &cfg, wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, &mut rng, &ModalityConfig::new("a", 3, 8).unwrap(), &cfg);
        randomize(&mut store, &mut rng);
        let x = seq(&mut rng, 8, 3);
        let target = Tensor::vector((0..8).map(|i| (i as f64 * 0.7).sin()).collect());
        let values: Vec<Tensor> = store.entries().iter().map(|e| e.value.clone()).collect();
        let report = grad_check(
            |t, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let xv = t.constant(x.clone());
                let h = encode_modality(t, &p, &enc, &cfg, xv)?;
                let tv = t.constant(target.clone());
                let prod = t.mul(h, tv)?;
                t.sum(prod)
            },
            &values,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn fuse(store: &ParamStore, cross: &CrossModalParams, gate: &GatingParams, cfg: &EncoderConfig, tokens: &Tensor) -> (Vec<f64>, Vec<f64>, Tensor) {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let s = tape.constant(tokens.clone());
        let refined = cross_modal_attention(&mut tape, &p, cross, cfg, s).unwrap();
        let fused = gate_fuse(&mut tape, &p, gate, refined).unwrap();
        (
            tape.value(fused.h).data().to_vec(),
            tape.value(fused.weights).data().to_vec(),
            tape.value(refined).clone(),
        )
    }

    fn fusion_fixture(seed: u64) -> (ParamStore, CrossModalParams, GatingParams, EncoderConfig) {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cross = CrossModalParams::new(&mut store, &mut rng, &cfg);
        let gate = GatingParams::new(&mut store, &mut rng, &cfg);
        randomize(&mut store, &mut rng);
        (store, cross, gate, cfg)
    }

    #[test]
    fn cross_attention_single_token_and_symmetry() {
        let (store, cross, gate, cfg) = fusion_fixture(4);
        let tok = Tensor::matrix(1, 8, (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let (h, w, refined) = fuse(&store, &cross, &gate, &cfg, &tok);
        assert_eq!(w, vec![1.0]);
        assert_eq!(h, refined.data());
        let (h2, _, _) = fuse(&store, &cross, &gate, &cfg, &tok);
        assert_eq!(h, h2);

        let row: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let twin = Tensor::matrix(2, 8, [row.clone(), row].concat()).unwrap();
        let (h, w, refined) = fuse(&store, &cross, &gate, &cfg, &twin);
        assert_eq!(refined.row(0), refined.row(1));
        assert!((w[0] - 0.5).abs() < 1e-15);
        for (a, b) in h.iter().zip(refined.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_weights_follow_scores() {
        // scores [ln 2, 0] -> weights [2/3, 1/3]
        let mut store = ParamStore::new();
        let w = store.add("gate.w", Tensor::matrix(2, 1, vec![2f64.ln(), 0.0]).unwrap(), true);
        let gate = GatingParams { w };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let refined = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let fused = gate_fuse(&mut tape, &p, &gate, refined).unwrap();
        let weights = tape.value(fused.weights).data();
        assert!((weights[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((weights[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(tape.value(fused.h).data(), weights);
    }

    #[test]
    fn fusion_is_permutation_consistent() {
        let (store, cross, gate, cfg) = fusion_fixture(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let forward = Tensor::matrix(3, 8, rows.concat()).unwrap();
        let perm = [2usize, 0, 1];
        let permuted = Tensor::matrix(3, 8, perm.iter().flat_map(|i| rows[*i].clone()).collect()).unwrap();
        let (h1, w1, r1) = fuse(&store, &cross, &gate, &cfg, &forward);
        let (h2, w2, r2) = fuse(&store, &cross, &gate, &cfg, &permuted);
        for (k, i) in perm.iter().enumerate() {
            assert!((w2[k] - w1[*i]).abs() < 1e-12);
            for (a, b) in r2.row(k).iter().zip(r1.row(*i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for (a, b) in h1.iter().zip(&h2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((w1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // h is exactly the gate-weighted sum of refined rows
        for (j, hj) in h1.iter().enumerate() {
            let recon: f64 = (0..3).map(|m| w1[m] * r1.row(m)[j]).sum();
            assert!((recon - hj).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let (store, cross, gate, cfg) = fusion_fixture(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens = seq(&mut rng, 3, 8);
        let mut values: Vec<Tensor> = store.entries().iter().map(|e| e.value.clone()).collect();
        values.push(tokens);
        let n = store.len();
        let report = grad_check(
            |t, vars| {
                let p = Bound::from_vars(vars[..n].to_vec());
                let refined = cross_modal_attention(t, &p, &cross, &cfg, vars[n])?;
                let fused = gate_fuse(t, &p, &gate, refined)?;
                let s = t.tanh(fused.h)?;
                t.sum(s)
            },
            &values,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
