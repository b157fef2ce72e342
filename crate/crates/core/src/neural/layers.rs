//! Trainable building blocks. Each layer registers its parameters in a
//! [`ParamStore`] under a name prefix and builds its forward pass on a [`Tape`].

use std::rc::Rc;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = format!("{name}.w");
        store.glorot(&weight, in_dim, out_dim);
        let bias = bias.then(|| {
            let b = format!("{name}.b");
            store.zeros(&b, 1, out_dim);
            b
        });
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let w = t.param(s, &self.weight);
        let y = t.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let b = t.param(s, b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Standard GRU cell:
/// `z = σ(x W_xz + h W_hz + b_z)`, `r = σ(x W_xr + h W_hr + b_r)`,
/// `n = tanh(x W_xn + r ⊙ (h W_hn) + b_n)`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden_dim: usize) -> Self {
        for g in ["z", "r", "n"] {
            store.glorot(&format!("{prefix}.w_x{g}"), input_dim, hidden_dim);
            store.glorot(&format!("{prefix}.w_h{g}"), hidden_dim, hidden_dim);
            store.zeros(&format!("{prefix}.b_{g}"), 1, hidden_dim);
        }
        GruCell {
            prefix: prefix.to_string(),
            input_dim,
            hidden_dim,
        }
    }

    fn p(&self, t: &mut Tape, s: &ParamStore, suffix: &str) -> Var {
        t.param(s, &format!("{}.{suffix}", self.prefix))
    }

    fn gate(&self, t: &mut Tape, s: &ParamStore, g: &str, x: Var, h: Var) -> (Var, Var) {
        let wx = self.p(t, s, &format!("w_x{g}"));
        let wh = self.p(t, s, &format!("w_h{g}"));
        let b = self.p(t, s, &format!("b_{g}"));
        let xw = t.matmul(x, wx);
        let xw = t.add_row(xw, b);
        let hw = t.matmul(h, wh);
        (xw, hw)
    }

    /// One step on 1×D row vectors.
    pub fn step(&self, t: &mut Tape, s: &ParamStore, h_prev: Var, x: Var) -> Var {
        let (xz, hz) = self.gate(t, s, "z", x, h_prev);
        let pre_z = t.add(xz, hz);
        let z = t.sigmoid(pre_z);
        let (xr, hr) = self.gate(t, s, "r", x, h_prev);
        let pre_r = t.add(xr, hr);
        let r = t.sigmoid(pre_r);
        let (xn, hn) = self.gate(t, s, "n", x, h_prev);
        let rh = t.mul(r, hn);
        let pre_n = t.add(xn, rh);
        let n = t.tanh(pre_n);
        let one_minus_z = t.affine(z, -1.0, 1.0);
        let a = t.mul(one_minus_z, n);
        let b = t.mul(z, h_prev);
        t.add(a, b)
    }

    /// Value-level step with shape and finiteness checks.
    pub fn step_values(&self, s: &ParamStore, h_prev: &Tensor, x: &Tensor) -> Result<Tensor> {
        if h_prev.shape() != [1, self.hidden_dim] || x.shape() != [1, self.input_dim] {
            return Err(Error::Shape(format!(
                "gru step expects h 1x{} and x 1x{}, got {:?} and {:?}",
                self.hidden_dim,
                self.input_dim,
                h_prev.shape(),
                x.shape()
            )));
        }
        let mut t = Tape::new();
        let h = t.leaf(h_prev.clone());
        let x = t.leaf(x.clone());
        let out = self.step(&mut t, s, h, x);
        let v = t.value(out).clone();
        v.ensure_finite("gru output")?;
        Ok(v)
    }
}

/// Learned position embedding, linear projection, then a bidirectional GRU.
/// Row `i` of the output is `[forward_i ; backward_i]`.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pos_emb: String,
    proj: Linear,
    fwd: GruCell,
    bwd: GruCell,
    pub feature_dim: usize,
    pub max_positions: usize,
    pub out_dim: usize,
}

impl ImageEncoder {
    /// `out_dim` must be even; each direction has `out_dim / 2` units.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        out_dim: usize,
        max_positions: usize,
    ) -> Self {
        assert!(out_dim % 2 == 0 && out_dim > 0, "encoder width must be even");
        let pos_emb = format!("{prefix}.pos_emb");
        let scale = 0.1;
        let pe = Tensor::uniform(max_positions, feature_dim, scale, store.rng());
        store.insert(&pos_emb, pe);
        let proj = Linear::new(store, &format!("{prefix}.proj"), feature_dim, out_dim / 2, true);
        let fwd = GruCell::new(store, &format!("{prefix}.fwd"), out_dim / 2, out_dim / 2);
        let bwd = GruCell::new(store, &format!("{prefix}.bwd"), out_dim / 2, out_dim / 2);
        ImageEncoder {
            pos_emb,
            proj,
            fwd,
            bwd,
            feature_dim,
            max_positions,
            out_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, features: Var) -> Result<Var> {
        let [n, d] = t.value(features).shape();
        if d != self.feature_dim {
            return Err(Error::Shape(format!(
                "image features have dimension {d}, encoder expects {}",
                self.feature_dim
            )));
        }
        if n == 0 || n > self.max_positions {
            return Err(Error::Shape(format!(
                "sequence length {n} outside 1..={}",
                self.max_positions
            )));
        }
        let pe = t.param(s, &self.pos_emb);
        let pos = t.slice_rows(pe, 0, n);
        let x = t.add(features, pos);
        let x = self.proj.forward(t, s, x);
        let half = self.out_dim / 2;
        let rows: Vec<Var> = (0..n).map(|i| t.slice_rows(x, i, 1)).collect();

        let mut h = t.leaf(Tensor::zeros(1, half));
        let mut fwd = Vec::with_capacity(n);
        for &xi in &rows {
            h = self.fwd.step(t, s, h, xi);
            fwd.push(h);
        }
        let mut h = t.leaf(Tensor::zeros(1, half));
        let mut bwd = vec![h; n];
        for i in (0..n).rev() {
            h = self.bwd.step(t, s, h, rows[i]);
            bwd[i] = h;
        }
        let out: Vec<Var> = (0..n).map(|i| t.concat_cols(&[fwd[i], bwd[i]])).collect();
        Ok(t.concat_rows(&out))
    }

    /// Value-level encoding of an `N × D_img` feature matrix.
    pub fn encode(&self, s: &ParamStore, features: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let f = t.leaf(features.clone());
        let out = self.forward(&mut t, s, f)?;
        let v = t.value(out).clone();
        v.ensure_finite("encoded images")?;
        Ok(v)
    }
}

/// Which keys each concept row may attend to: row `i` covers the concept
/// nodes `0..n` followed by the image nodes `n..n+N`.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub concepts: usize,
    pub images: usize,
    allowed: Rc<Vec<bool>>,
}

impl AttentionMask {
    /// Self-loops are always added; `edges` are undirected concept pairs and
    /// `image_of[i]` is the image each concept attends to.
    pub fn new(concepts: usize, images: usize, edges: &[(usize, usize)], image_of: &[usize]) -> Self {
        assert_eq!(image_of.len(), concepts);
        let width = concepts + images;
        let mut allowed = vec![false; concepts * width];
        for i in 0..concepts {
            allowed[i * width + i] = true;
            allowed[i * width + concepts + image_of[i]] = true;
        }
        for &(u, v) in edges {
            allowed[u * width + v] = true;
            allowed[v * width + u] = true;
        }
        AttentionMask {
            concepts,
            images,
            allowed: Rc::new(allowed),
        }
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * (self.concepts + self.images) + key]
    }

    pub fn shared(&self) -> Rc<Vec<bool>> {
        Rc::clone(&self.allowed)
    }
}

#[derive(Clone, Debug)]
struct GatHead {
    w: String,
    a_src: String,
    a_dst: String,
}

/// One multi-head attention layer over concept queries and concept+image keys.
#[derive(Clone, Debug)]
pub struct GatLayer {
    heads: Vec<GatHead>,
    pub slope: f64,
}

impl GatLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, head_dim: usize, heads: usize) -> Self {
        let heads = (0..heads)
            .map(|k| {
                let h = GatHead {
                    w: format!("{prefix}.h{k}.w"),
                    a_src: format!("{prefix}.h{k}.a_src"),
                    a_dst: format!("{prefix}.h{k}.a_dst"),
                };
                store.glorot(&h.w, in_dim, head_dim);
                store.glorot(&h.a_src, head_dim, 1);
                store.glorot(&h.a_dst, head_dim, 1);
                h
            })
            .collect();
        GatLayer { heads, slope: 0.2 }
    }

    /// `nodes` stacks concept rows then image rows. Returns per-head outputs
    /// (concept rows only) and per-head attention matrices.
    pub fn forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        nodes: Var,
        mask: &AttentionMask,
    ) -> (Vec<Var>, Vec<Var>) {
        let n = mask.concepts;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut atts = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let w = t.param(s, &h.w);
            let a_src = t.param(s, &h.a_src);
            let a_dst = t.param(s, &h.a_dst);
            let wh = t.matmul(nodes, w);
            let queries = t.slice_rows(wh, 0, n);
            let sq = t.matmul(queries, a_dst);
            let sk = t.matmul(wh, a_src);
            let e = t.outer_add(sq, sk);
            let e = t.leaky_relu(e, self.slope);
            let att = t.softmax_rows(e, Some(mask.shared()));
            outs.push(t.matmul(att, wh));
            atts.push(att);
        }
        (outs, atts)
    }
}

/// Two-layer graph attention update of concept features. Image features are
/// projected to the concept width and serve as attention sources only.
#[derive(Clone, Debug)]
pub struct ConceptGat {
    img_proj: Linear,
    layer1: GatLayer,
    layer2: GatLayer,
    pub dim: usize,
    pub heads: usize,
}

impl ConceptGat {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, image_dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "GAT width must divide by heads");
        ConceptGat {
            img_proj: Linear::new(store, &format!("{prefix}.img_proj"), image_dim, dim, true),
            layer1: GatLayer::new(store, &format!("{prefix}.l1"), dim, dim / heads, heads),
            layer2: GatLayer::new(store, &format!("{prefix}.l2"), dim, dim, heads),
            dim,
            heads,
        }
    }

    /// Layer 1 concatenates heads (then ELU); layer 2 averages them.
    pub fn forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        concepts: Var,
        images: Var,
        mask: &AttentionMask,
    ) -> Var {
        let img = self.img_proj.forward(t, s, images);
        let x1 = t.concat_rows(&[concepts, img]);
        let (h1, _) = self.layer1.forward(t, s, x1, mask);
        let h1 = t.concat_cols(&h1);
        let h1 = t.elu(h1);
        let x2 = t.concat_rows(&[h1, img]);
        let (h2, _) = self.layer2.forward(t, s, x2, mask);
        let mut acc = h2[0];
        for &h in &h2[1..] {
            acc = t.add(acc, h);
        }
        t.scale(acc, 1.0 / h2.len() as f64)
    }
}

/// Multi-head attention pooling of a concept set into one vector.
#[derive(Clone, Debug)]
pub struct MultiHeadPool {
    heads: Vec<(String, String, String)>,
    out: Linear,
    pub dim: usize,
}

impl MultiHeadPool {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "pool width must divide by heads");
        let d = dim / heads;
        let heads = (0..heads)
            .map(|k| {
                let names = (
                    format!("{prefix}.h{k}.key"),
                    format!("{prefix}.h{k}.query"),
                    format!("{prefix}.h{k}.value"),
                );
                store.glorot(&names.0, dim, d);
                store.glorot(&names.1, d, 1);
                store.glorot(&names.2, dim, d);
                names
            })
            .collect();
        MultiHeadPool {
            heads,
            out: Linear::new(store, &format!("{prefix}.out"), dim, dim, true),
            dim,
        }
    }

    /// Pools `m × dim` rows into `1 × dim`. Returns the pooled vector and
    /// the per-head attention rows (each `1 × m`, summing to one).
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> (Var, Vec<Var>) {
        assert!(t.value(x).rows() > 0, "pooling an empty set");
        let mut parts = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for (key, query, value) in &self.heads {
            let wk = t.param(s, key);
            let q = t.param(s, query);
            let wv = t.param(s, value);
            let k = t.matmul(x, wk);
            let k = t.tanh(k);
            let scores = t.matmul(k, q);
            let scores = t.transpose(scores);
            let w = t.softmax_rows(scores, None);
            let v = t.matmul(x, wv);
            parts.push(t.matmul(w, v));
            weights.push(w);
        }
        let cat = t.concat_cols(&parts);
        (self.out.forward(t, s, cat), weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn gru_zero_everything_gives_zero() {
        let mut s = ParamStore::new(0);
        let cell = GruCell::new(&mut s, "g", 3, 4);
        let names: Vec<String> = s.names().map(str::to_string).collect();
        for n in names {
            s.value_mut(&n).unwrap().fill(0.0);
        }
        let h = cell
            .step_values(&s, &Tensor::zeros(1, 4), &Tensor::zeros(1, 3))
            .unwrap();
        assert_eq!(h, Tensor::zeros(1, 4));
    }

    #[test]
    fn gru_is_deterministic() {
        let mut s = ParamStore::new(4);
        let cell = GruCell::new(&mut s, "g", 5, 6);
        let h = rand_tensor(1, 6, 1);
        let x = rand_tensor(1, 5, 2);
        let a = cell.step_values(&s, &h, &x).unwrap();
        let b = cell.step_values(&s, &h, &x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn gru_rejects_bad_shapes() {
        let mut s = ParamStore::new(4);
        let cell = GruCell::new(&mut s, "g", 5, 6);
        assert!(cell
            .step_values(&s, &Tensor::zeros(1, 6), &Tensor::zeros(1, 4))
            .is_err());
    }

    #[test]
    fn gru_gradients_match_fd_at_64_dims() {
        let mut s = ParamStore::new(7);
        let cell = GruCell::new(&mut s, "g", 64, 64);
        let h0 = rand_tensor(1, 64, 3);
        let x = rand_tensor(1, 64, 4);
        let target = rand_tensor(1, 64, 5);
        let report = grad_check(
            &s,
            |t, s| {
                let h = t.leaf(h0.clone());
                let xv = t.leaf(x.clone());
                let out = cell.step(t, s, h, xv);
                t.sq_err(out, target.clone(), None)
            },
            &GradCheckOptions {
                max_per_param: Some(40),
                ..Default::default()
            },
        );
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn encoder_single_image_and_shape_error() {
        let mut s = ParamStore::new(2);
        let enc = ImageEncoder::new(&mut s, "enc", 8, 6, 5);
        let one = enc.encode(&s, &rand_tensor(1, 8, 1)).unwrap();
        assert_eq!(one.shape(), [1, 6]);
        assert!(matches!(enc.encode(&s, &rand_tensor(3, 7, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn encoder_depends_on_position() {
        let mut s = ParamStore::new(3);
        let enc = ImageEncoder::new(&mut s, "enc", 4, 6, 5);
        let f = rand_tensor(3, 4, 9);
        let permuted = f.select_rows(&[2, 0, 1]);
        let a = enc.encode(&s, &f).unwrap();
        let b = enc.encode(&s, &permuted).unwrap();
        // row 0 of `a` and row 1 of `b` encode the same image at different positions
        assert!(a.select_rows(&[0]).max_abs_diff(&b.select_rows(&[1])) > 1e-6);
    }

    #[test]
    fn gat_uniform_attention_for_identical_features() {
        let mut s = ParamStore::new(1);
        let layer = GatLayer::new(&mut s, "gat", 4, 4, 1);
        let mask = AttentionMask::new(4, 1, &[(0, 1), (1, 2)], &[0, 0, 0, 0]);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(5, 4, 0.3));
        let (_, att) = layer.forward(&mut t, &s, x, &mask);
        let a = t.value(att[0]);
        // node 1 sees itself, 0, 2 and the image: four keys
        for key in [0, 1, 2, 4] {
            assert!((a.get(1, key) - 0.25).abs() < 1e-12);
        }
        assert_eq!(a.get(1, 3), 0.0);
        // node 3 sees itself and the image
        assert!((a.get(3, 3) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gat_ignores_non_neighbours() {
        let mut s = ParamStore::new(1);
        let layer = GatLayer::new(&mut s, "gat", 4, 3, 2);
        let mask = AttentionMask::new(3, 1, &[(0, 1)], &[0, 0, 0]);
        let base = rand_tensor(4, 4, 8);
        let mut bumped = base.clone();
        for c in 0..4 {
            bumped.set(2, c, bumped.get(2, c) + 5.0);
        }
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let (outs, _) = layer.forward(&mut t, &s, xv, &mask);
            outs.iter().map(|&o| t.value(o).select_rows(&[0])).collect::<Vec<_>>()
        };
        for (a, b) in run(&base).iter().zip(run(&bumped).iter()) {
            assert_eq!(a.max_abs_diff(b), 0.0);
        }
    }

    #[test]
    fn pool_single_row_is_projected_value() {
        let mut s = ParamStore::new(6);
        let pool = MultiHeadPool::new(&mut s, "pool", 4, 2);
        let x = rand_tensor(1, 4, 3);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let (out, w) = pool.forward(&mut t, &s, xv);
        for &wi in &w {
            assert_eq!(t.value(wi).data(), &[1.0]);
        }
        let v0 = x.matmul(s.value("pool.h0.value").unwrap());
        let v1 = x.matmul(s.value("pool.h1.value").unwrap());
        let cat = Tensor::row(&[v0.data(), v1.data()].concat());
        let mut expect = cat.matmul(s.value("pool.out.w").unwrap());
        expect.add_assign(s.value("pool.out.b").unwrap());
        assert!(t.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn pool_is_permutation_invariant() {
        let mut s = ParamStore::new(6);
        let pool = MultiHeadPool::new(&mut s, "pool", 8, 4);
        let x = rand_tensor(5, 8, 3);
        let run = |x: Tensor| {
            let mut t = Tape::new();
            let xv = t.leaf(x);
            let (o, _) = pool.forward(&mut t, &s, xv);
            t.value(o).clone()
        };
        let a = run(x.clone());
        let b = run(x.select_rows(&[3, 1, 4, 0, 2]));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
