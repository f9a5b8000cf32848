//! Layers built on the tape: linear maps, two-layer MLPs, multi-head
//! attention, pre-norm transformer blocks, patch embedding and learned
//! positional tables.
//!
//! Layers only hold parameter names and sizes; values live in a
//! [`ParameterStore`]. Every layer has an `init` that registers its tensors
//! and a `forward` that records its computation on a [`Tape`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

const EMBED_STD: f64 = 0.02;

fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized by construction")
}

pub(crate) fn normal_table<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized by construction")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        store.insert(self.weight(), xavier_uniform(rng, self.d_in, self.d_out))?;
        store.insert(self.bias(), Tensor::zeros(&[self.d_out]))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight())?;
        let b = tape.param(store, &self.bias())?;
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }
}

/// linear → gelu → linear
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new(name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp2 {
            fc1: Linear::new(format!("{name}.fc1"), d_in, d_hidden),
            fc2: Linear::new(format!("{name}.fc2"), d_hidden, d_out),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        LayerNorm {
            name: name.into(),
            d,
        }
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        store.insert(format!("{}.gain", self.name), Tensor::full(&[self.d], 1.0))?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.d]))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let g = tape.param(store, &format!("{}.gain", self.name))?;
        let b = tape.param(store, &format!("{}.bias", self.name))?;
        tape.layer_norm(x, g, b)
    }
}

/// Scaled dot-product multi-head attention with query/key/value/output
/// projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub d: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new(name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            d,
            heads,
            q: Linear::new(format!("{name}.q"), d, d),
            k: Linear::new(format!("{name}.k"), d, d),
            v: Linear::new(format!("{name}.v"), d, d),
            o: Linear::new(format!("{name}.o"), d, d),
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<Var> {
        self.forward_with_weights(tape, store, queries, keys, values)
            .map(|(out, _)| out)
    }

    /// Also returns the softmax weights, shaped `[B, heads, Lq, Lk]`.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<(Var, Var)> {
        let sq = tape.shape(queries).to_vec();
        let sk = tape.shape(keys).to_vec();
        let sv = tape.shape(values).to_vec();
        let rank = sq.len();
        if rank < 2
            || sk.len() != rank
            || sk != sv
            || sq[rank - 1] != self.d
            || sk[rank - 1] != self.d
            || sq[..rank - 2] != sk[..rank - 2]
        {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let prefix = &sq[..rank - 2];
        let b: usize = prefix.iter().product();
        let (lq, lk) = (sq[rank - 2], sk[rank - 2]);
        let (h, dh) = (self.heads, self.d / self.heads);

        let split_heads = |tape: &mut Tape, x: Var, l: usize| -> Result<Var> {
            let x = tape.reshape(x, &[b, l, h, dh])?;
            tape.transpose(x, 1, 2)
        };
        let q = self.q.forward(tape, store, queries)?;
        let q = split_heads(tape, q, lq)?;
        let k = self.k.forward(tape, store, keys)?;
        let k = split_heads(tape, k, lk)?;
        let k = tape.transpose(k, 2, 3)?;
        let v = self.v.forward(tape, store, values)?;
        let v = split_heads(tape, v, lk)?;

        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.transpose(ctx, 1, 2)?;
        let mut out_shape = prefix.to_vec();
        out_shape.extend([lq, self.d]);
        let ctx = tape.reshape(ctx, &out_shape)?;
        let out = self.o.forward(tape, store, ctx)?;
        Ok((out, weights))
    }
}

/// Pre-norm residual block: `x + Attn(LN(x))`, then `+ FF(LN(·))` with a
/// `D → 4D → D` feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: Mlp2,
}

impl TransformerBlock {
    pub fn new(name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(format!("{name}.ln1"), d),
            attn: Attention::new(&format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(format!("{name}.ln2"), d),
            ff: Mlp2::new(&format!("{name}.ff"), d, 4 * d, d),
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.ln1.init(store)?;
        self.attn.init(store, rng)?;
        self.ln2.init(store)?;
        self.ff.init(store, rng)
    }

    /// Parameter names of the two residual-branch output projections.
    pub fn output_projections(&self) -> [String; 4] {
        [
            self.attn.o.weight(),
            self.attn.o.bias(),
            self.ff.fc2.weight(),
            self.ff.fc2.bias(),
        ]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let n = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n, n, n)?;
        let h = tape.add(x, a)?;
        let n = self.ln2.forward(tape, store, h)?;
        let f = self.ff.forward(tape, store, n)?;
        tape.add(h, f)
    }
}

/// A stack of transformer blocks sharing one width.
#[derive(Clone, Debug)]
pub struct BlockStack {
    pub blocks: Vec<TransformerBlock>,
}

impl BlockStack {
    pub fn new(name: &str, depth: usize, d: usize, heads: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(&format!("{name}.{i}"), d, heads))
            .collect::<Result<_>>()?;
        Ok(BlockStack { blocks })
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.init(store, rng))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, store, x)?;
        }
        Ok(x)
    }
}

/// Splits an `H×W×C` raster (row-major, channel fastest) into
/// non-overlapping `P×P` patches, one flattened row per patch.
pub fn patchify(data: &[f32], h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::usage(format!(
            "patch size {patch} does not divide raster {h}x{w}"
        )));
    }
    if data.len() != h * w * c {
        return Err(Error::shape("patchify", &[h, w, c], &[data.len()]));
    }
    let (ph, pw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let mut out = Vec::with_capacity(ph * pw * width);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                let row = py * patch + dy;
                let start = (row * w + px * patch) * c;
                out.extend(data[start..start + patch * c].iter().map(|&v| f64::from(v)));
            }
        }
    }
    Tensor::new(vec![ph * pw, width], out)
}

/// Linear projection of flattened patches to the model width.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub channels: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(name: &str, patch: usize, channels: usize, d: usize) -> Self {
        PatchEmbed {
            patch,
            channels,
            proj: Linear::new(format!("{name}.proj"), patch * patch * channels, d),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.proj.init(store, rng)
    }

    /// `patches`: `[…, tokens, P·P·C]` as produced by [`patchify`].
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, patches: Var) -> Result<Var> {
        self.proj.forward(tape, store, patches)
    }
}

/// Learned embedding per (view, token) pair, stored as a
/// `[views · tokens, D]` table.
#[derive(Clone, Debug)]
pub struct PositionalTable {
    pub name: String,
    pub views: usize,
    pub tokens: usize,
    pub d: usize,
}

impl PositionalTable {
    pub fn new(name: impl Into<String>, views: usize, tokens: usize, d: usize) -> Self {
        PositionalTable {
            name: name.into(),
            views,
            tokens,
            d,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        store.insert(
            self.name.clone(),
            normal_table(rng, self.views * self.tokens, self.d, EMBED_STD),
        )
    }

    pub fn row(&self, view: usize, token: usize) -> Result<usize> {
        if view >= self.views || token >= self.tokens {
            return Err(Error::usage(format!(
                "position ({view}, {token}) outside {}x{} table",
                self.views, self.tokens
            )));
        }
        Ok(view * self.tokens + token)
    }

    /// Embedding of one (view, token) pair, shape `[1, D]`.
    pub fn lookup(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        view: usize,
        token: usize,
    ) -> Result<Var> {
        let row = self.row(view, token)?;
        let table = tape.param(store, &self.name)?;
        tape.gather(table, &[row])
    }

    /// Whole table reshaped to `[views, tokens, D]`.
    pub fn all(&self, tape: &mut Tape, store: &ParameterStore) -> Result<Var> {
        let table = tape.param(store, &self.name)?;
        tape.reshape(table, &[self.views, self.tokens, self.d])
    }
}

/// Registers a learned `[rows, D]` query table.
pub fn init_queries<R: Rng>(
    store: &mut ParameterStore,
    rng: &mut R,
    name: &str,
    rows: usize,
    d: usize,
) -> Result<()> {
    store.insert(name, normal_table(rng, rows, d, EMBED_STD))
}

/// Query table `[rows, D]` repeated over a batch: `[batch, rows, D]`.
pub fn batched_queries(
    tape: &mut Tape,
    store: &ParameterStore,
    name: &str,
    batch: usize,
) -> Result<Var> {
    let q = tape.param(store, name)?;
    tape.repeat(q, batch)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn set(store: &mut ParameterStore, name: &str, t: Tensor) {
        *store.value_mut(name).unwrap() = t;
    }

    #[test]
    fn single_key_attention_passes_value_through() {
        let mut r = rng();
        let att = Attention::new("a", 4, 2).unwrap();
        let mut store = ParameterStore::new();
        att.init(&mut store, &mut r).unwrap();
        for l in [&att.q, &att.k, &att.v, &att.o] {
            set(&mut store, &l.weight(), Tensor::identity(4));
        }
        let mut tape = Tape::new();
        let q = tape.constant(random(&mut r, &[3, 4]));
        let kv = tape.constant(random(&mut r, &[1, 4]));
        let (out, w) = att
            .forward_with_weights(&mut tape, &store, q, kv, kv)
            .unwrap();
        for row in tape.value(out).data().chunks(4) {
            for (a, b) in row.iter().zip(tape.value(kv).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(tape.value(w).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn attention_is_invariant_to_key_value_permutation() {
        let mut r = rng();
        let att = Attention::new("a", 8, 4).unwrap();
        let mut store = ParameterStore::new();
        att.init(&mut store, &mut r).unwrap();
        let q = random(&mut r, &[2, 8]);
        let kv = random(&mut r, &[5, 8]);
        let perm = [3, 0, 4, 1, 2];
        let kv_perm: Vec<f64> = perm.iter().flat_map(|&i| kv.row(i).to_vec()).collect();
        let kv_perm = Tensor::new(vec![5, 8], kv_perm).unwrap();

        let run = |kv: &Tensor| {
            let mut tape = Tape::new();
            let qv = tape.constant(q.clone());
            let k = tape.constant(kv.clone());
            let o = att.forward(&mut tape, &store, qv, k, k).unwrap();
            tape.value(o).clone()
        };
        let (a, b) = (run(&kv), run(&kv_perm));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weight_rows_sum_to_one() {
        let mut r = rng();
        let att = Attention::new("a", 8, 2).unwrap();
        let mut store = ParameterStore::new();
        att.init(&mut store, &mut r).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(random(&mut r, &[3, 4, 8]));
        let k = tape.constant(random(&mut r, &[3, 6, 8]));
        let (_, w) = att
            .forward_with_weights(&mut tape, &store, q, k, k)
            .unwrap();
        assert_eq!(tape.shape(w), &[3, 2, 4, 6]);
        for row in tape.value(w).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rejects_bad_width_and_heads() {
        assert!(Attention::new("a", 6, 4).is_err());
        let att = Attention::new("a", 4, 2).unwrap();
        let mut store = ParameterStore::new();
        att.init(&mut store, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(att.forward(&mut tape, &store, q, q, q).is_err());
    }

    #[test]
    fn zeroed_output_projections_make_blocks_identity() {
        let mut r = rng();
        let stack = BlockStack::new("s", 3, 8, 2).unwrap();
        let mut store = ParameterStore::new();
        stack.init(&mut store, &mut r).unwrap();
        for b in &stack.blocks {
            for name in b.output_projections() {
                let shape = store.value(&name).unwrap().shape().to_vec();
                set(&mut store, &name, Tensor::zeros(&shape));
            }
        }
        let x = random(&mut r, &[5, 8]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = stack.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn transformer_block_preserves_shape() {
        let mut r = rng();
        let block = TransformerBlock::new("b", 8, 4).unwrap();
        let mut store = ParameterStore::new();
        block.init(&mut store, &mut r).unwrap();
        for l in [1, 4, 16] {
            let mut tape = Tape::new();
            let x = tape.constant(random(&mut r, &[l, 8]));
            let y = block.forward(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(y), &[l, 8]);
        }
    }

    #[test]
    fn mlp2_shapes_and_zero_weights() {
        let mut r = rng();
        let mlp = Mlp2::new("m", 44, 32, 32);
        let mut store = ParameterStore::new();
        mlp.init(&mut store, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut r, &[4, 44]));
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[4, 32]);

        set(&mut store, &mlp.fc2.weight(), Tensor::zeros(&[32, 32]));
        let bias = random(&mut r, &[32]);
        set(&mut store, &mlp.fc2.bias(), bias.clone());
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut r, &[4, 44]));
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        for row in tape.value(y).data().chunks(32) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn patchify_counts_and_constant_raster() {
        let raster = vec![0.25f32; 64 * 64 * 3];
        let p = patchify(&raster, 64, 64, 3, 8).unwrap();
        assert_eq!(p.shape(), &[64, 192]);
        assert!(patchify(&raster, 64, 64, 3, 7).is_err());

        let mut r = rng();
        let pe = PatchEmbed::new("pe", 8, 3, 16);
        let mut store = ParameterStore::new();
        pe.init(&mut store, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let tokens = pe.forward(&mut tape, &store, x).unwrap();
        let t = tape.value(tokens);
        assert_eq!(t.shape(), &[64, 16]);
        for i in 1..64 {
            assert_eq!(t.row(i), t.row(0));
        }
    }

    #[test]
    fn patchify_layout_is_row_major_within_patch() {
        // 4x4 single-channel raster with value = row * 4 + col
        let raster: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let p = patchify(&raster, 4, 4, 1, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn positional_rows_are_distinct() {
        let mut r = rng();
        let pos = PositionalTable::new("pos", 4, 16, 8);
        let mut store = ParameterStore::new();
        pos.init(&mut store, &mut r).unwrap();
        assert_eq!(store.value("pos").unwrap().shape(), &[64, 8]);
        let mut rows = std::collections::BTreeSet::new();
        for v in 0..4 {
            for t in 0..16 {
                assert!(rows.insert(pos.row(v, t).unwrap()));
            }
        }
        assert!(pos.row(4, 0).is_err());
        assert!(pos.row(0, 16).is_err());
        let mut tape = Tape::new();
        let a = pos.lookup(&mut tape, &store, 1, 2).unwrap();
        let b = pos.lookup(&mut tape, &store, 2, 1).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
    }
}
