//! The retrieval network: fused item embeddings, a shared causal backbone,
//! and K single-layer prediction branches with independent parameters.
//!
//! Branch layers compute a single query row (the last position left open by
//! the branch mask), attending over the backbone's hidden states. A learned
//! null token is always attendable when enabled, so fully-blocked rows still
//! produce a usable representation.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{AttentionMask, MaskSource};
use crate::synth::{mix_seed, Item};
use crate::tensor::{BufId, ParamSet, Tape, Tensor, BIAS_SKIP};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SQRC";
const CHECKPOINT_VERSION: u32 = 1;
const HASH_SALT: u64 = 0x5EED_1D;

// ── configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// embedding and hidden width
    pub d: usize,
    /// shared transformer layers
    pub num_backbone_layers: usize,
    pub num_heads: usize,
    /// prediction branches K
    pub num_branches: usize,
    /// ID-embedding table rows
    pub hash_buckets: usize,
    pub num_genres: u32,
    pub num_languages: u32,
    /// condition vocabulary for the fine-tuning family
    pub condition_vocab: u32,
    pub max_seq_len: usize,
    pub null_token_enabled: bool,
    pub condition_embedding_enabled: bool,
    /// relative-position bias buckets (shared across layers, per head)
    pub bias_buckets: usize,
    /// initialization seed
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            num_backbone_layers: 3,
            num_heads: 4,
            num_branches: 2,
            hash_buckets: 8192,
            num_genres: 10,
            num_languages: 4,
            condition_vocab: 10,
            max_seq_len: 64,
            null_token_enabled: true,
            condition_embedding_enabled: true,
            bias_buckets: 16,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d={} must be a positive multiple of num_heads={}",
                self.d, self.num_heads
            )));
        }
        if self.d % 8 != 0 {
            return Err(Error::Config(format!(
                "d={} must be divisible by 8 (category embeddings use d/8)",
                self.d
            )));
        }
        if self.num_branches == 0 {
            return Err(Error::Config("num_branches must be >= 1".into()));
        }
        if self.hash_buckets == 0 {
            return Err(Error::Config("hash_buckets must be >= 1".into()));
        }
        if self.num_backbone_layers == 0 {
            return Err(Error::Config("num_backbone_layers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn d_id(&self) -> usize {
        self.d / 2
    }

    pub fn d_cat(&self) -> usize {
        self.d / 8
    }

    /// Width of the concatenated (id, genre, language, release) embedding.
    pub fn fused_width(&self) -> usize {
        self.d_id() + 3 * self.d_cat()
    }
}

/// Trainable tensor count implied by a config. Kept as an explicit formula so
/// it can be asserted against the actual allocation.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d;
    let per_layer = 12 * d * d + 12 * d;
    let mut total = cfg.hash_buckets * cfg.d_id()
        + (cfg.num_genres as usize + cfg.num_languages as usize + 2) * cfg.d_cat()
        + cfg.fused_width() * d
        + d
        + cfg.bias_buckets * cfg.num_heads
        + (cfg.num_backbone_layers + cfg.num_branches) * per_layer;
    if cfg.null_token_enabled {
        total += d;
    }
    if cfg.condition_embedding_enabled {
        total += cfg.condition_vocab as usize * d;
    }
    total
}

// ── parameter layout ─────────────────────────────────────────────────

// No key bias: a constant shift of every key cancels inside the row softmax,
// so the parameter would be inert.
#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct ParamIdx {
    id_table: usize,
    genre: usize,
    language: usize,
    release: usize,
    fuse_w: usize,
    fuse_b: usize,
    rel_bias: usize,
    null_token: Option<usize>,
    cond_embed: Option<usize>,
    backbone: Vec<LayerIdx>,
    branches: Vec<LayerIdx>,
}

fn push_layer(params: &mut ParamSet, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> LayerIdx {
    let proj_std = 1.0 / (d as f64).sqrt();
    let ffn2_std = 1.0 / (4.0 * d as f64).sqrt();
    let mut mat = |name: &str, shape: &[usize], std: f64| {
        params.push(&format!("{prefix}.{name}"), Tensor::randn(shape, std, rng))
    };
    let wq = mat("wq", &[d, d], proj_std);
    let wk = mat("wk", &[d, d], proj_std);
    let wv = mat("wv", &[d, d], proj_std);
    let wo = mat("wo", &[d, d], proj_std);
    let w1 = mat("ffn.w1", &[d, 4 * d], proj_std);
    let w2 = mat("ffn.w2", &[4 * d, d], ffn2_std);
    let mut vec = |name: &str, fill: f64| {
        params.push(
            &format!("{prefix}.{name}"),
            Tensor::from_vec(&[1, d], vec![fill; d]).unwrap(),
        )
    };
    let ln1_g = vec("ln1.g", 1.0);
    let ln1_b = vec("ln1.b", 0.0);
    let bq = vec("bq", 0.0);
    let bv = vec("bv", 0.0);
    let bo = vec("bo", 0.0);
    let ln2_g = vec("ln2.g", 1.0);
    let ln2_b = vec("ln2.b", 0.0);
    let b2 = vec("ffn.b2", 0.0);
    let b1 = params.push(
        &format!("{prefix}.ffn.b1"),
        Tensor::from_vec(&[1, 4 * d], vec![0.0; 4 * d]).unwrap(),
    );
    LayerIdx { ln1_g, ln1_b, wq, bq, wk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2 }
}

// ── model ────────────────────────────────────────────────────────────

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    idx: ParamIdx,
    /// Degenerate attention rows observed with the null token disabled.
    pub degenerate_row_warnings: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            idx: self.idx.clone(),
            degenerate_row_warnings: AtomicU64::new(self.degenerate_row_warnings.load(Ordering::Relaxed)),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.init_seed, 0x4D0D31));
        let mut params = ParamSet::new();
        let d = config.d;
        let emb_std = 0.1;

        let id_table = params.push(
            "embed.id",
            Tensor::randn(&[config.hash_buckets, config.d_id()], emb_std, &mut rng),
        );
        let genre = params.push(
            "embed.genre",
            Tensor::randn(&[config.num_genres as usize, config.d_cat()], emb_std, &mut rng),
        );
        let language = params.push(
            "embed.language",
            Tensor::randn(&[config.num_languages as usize, config.d_cat()], emb_std, &mut rng),
        );
        let release = params.push("embed.release", Tensor::randn(&[2, config.d_cat()], emb_std, &mut rng));
        let fuse_w = params.push(
            "embed.fuse_w",
            Tensor::randn(&[config.fused_width(), d], 1.0 / (config.fused_width() as f64).sqrt(), &mut rng),
        );
        let fuse_b = params.push("embed.fuse_b", Tensor::zeros(&[1, d]));
        let rel_bias = params.push(
            "bias.rel",
            Tensor::zeros(&[1, config.bias_buckets * config.num_heads]),
        );
        let null_token = config
            .null_token_enabled
            .then(|| params.push("null.token", Tensor::randn(&[1, d], emb_std, &mut rng)));
        let cond_embed = config.condition_embedding_enabled.then(|| {
            params.push(
                "cond.embed",
                Tensor::randn(&[config.condition_vocab as usize, d], emb_std, &mut rng),
            )
        });
        let backbone = (0..config.num_backbone_layers)
            .map(|l| push_layer(&mut params, &format!("backbone.{l}"), d, &mut rng))
            .collect();
        let branches = (0..config.num_branches)
            .map(|k| push_layer(&mut params, &format!("branch.{}", k + 1), d, &mut rng))
            .collect();

        let idx = ParamIdx {
            id_table,
            genre,
            language,
            release,
            fuse_w,
            fuse_b,
            rel_bias,
            null_token,
            cond_embed,
            backbone,
            branches,
        };
        let model = Model { config, params, idx, degenerate_row_warnings: AtomicU64::new(0) };
        debug_assert_eq!(model.params.total_params(), param_count(&model.config));
        Ok(model)
    }

    /// Hash bucket for an item id. Collisions are intentional: collided ids
    /// with equal categories fuse to identical embeddings.
    pub fn hash_bucket(&self, item_id: u64) -> usize {
        (mix_seed(item_id, HASH_SALT) % self.config.hash_buckets as u64) as usize
    }

    /// Indices of the per-branch parameter tensors (for tests and surgery).
    pub fn branch_param_range(&self, k: usize) -> Vec<usize> {
        let l = &self.idx.branches[k - 1];
        vec![
            l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.wv, l.bv, l.wo, l.bo, l.ln2_g, l.ln2_b, l.w1,
            l.b1, l.w2, l.b2,
        ]
    }

    // ── embedding fusion ─────────────────────────────────────────

    /// Fused embeddings for a list of items: concat(id, genre, language,
    /// release) projected to d. Output is (len x d) on the tape.
    pub fn fuse_items(&self, tape: &mut Tape, ids: &[BufId], items: &[&Item]) -> Result<BufId> {
        let id_ix: Arc<Vec<usize>> = Arc::new(items.iter().map(|i| self.hash_bucket(i.item_id)).collect());
        let genre_ix: Arc<Vec<usize>> = Arc::new(items.iter().map(|i| i.genre as usize).collect());
        let lang_ix: Arc<Vec<usize>> = Arc::new(items.iter().map(|i| i.language as usize).collect());
        let rel_ix: Arc<Vec<usize>> = Arc::new(
            items
                .iter()
                .map(|i| match i.release_bucket {
                    crate::synth::ReleaseBucket::New => 0usize,
                    crate::synth::ReleaseBucket::Classic => 1usize,
                })
                .collect(),
        );
        for item in items {
            if item.genre >= self.config.num_genres || item.language >= self.config.num_languages {
                return Err(Error::Data(format!(
                    "item {} has category outside the configured vocabularies",
                    item.item_id
                )));
            }
        }
        let id_e = tape.gather(ids[self.idx.id_table], id_ix)?;
        let g_e = tape.gather(ids[self.idx.genre], genre_ix)?;
        let l_e = tape.gather(ids[self.idx.language], lang_ix)?;
        let r_e = tape.gather(ids[self.idx.release], rel_ix)?;
        let cat = tape.concat_cols(&[id_e, g_e, l_e, r_e])?;
        let proj = tape.matmul(cat, ids[self.idx.fuse_w])?;
        tape.add_row_vec(proj, ids[self.idx.fuse_b])
    }

    /// Fused embedding of one item as a plain tensor (no gradient tracking).
    pub fn fuse_item_embedding(&self, item: &Item) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids = self.params.register(&mut tape);
        let out = self.fuse_items(&mut tape, &ids, &[item])?;
        Tensor::from_vec(&[self.config.d], tape.value(out).to_vec())
    }

    // ── attention plumbing ───────────────────────────────────────

    /// Per-head flat indices into the relative-bias table for an n x cols
    /// logit matrix (cols = n, or n+1 with a trailing null column).
    fn bias_buckets_matrix(&self, n: usize, cols: usize, head: usize) -> Vec<usize> {
        let mut out = vec![BIAS_SKIP; n * cols];
        for i in 0..n {
            for j in 0..n.min(cols) {
                if j <= i {
                    let bucket = relative_bucket(i - j, self.config.bias_buckets);
                    out[i * cols + j] = bucket * self.config.num_heads + head;
                }
            }
        }
        out
    }

    /// Blocked matrix extended with an always-open null column when enabled.
    fn extend_blocked(&self, mask: &AttentionMask) -> (Vec<bool>, usize) {
        let n = mask.len();
        if !self.config.null_token_enabled {
            return (mask.blocked().to_vec(), n);
        }
        let cols = n + 1;
        let mut out = vec![false; n * cols];
        for i in 0..n {
            out[i * cols..i * cols + n].copy_from_slice(mask.blocked_row(i));
        }
        (out, cols)
    }

    /// One pre-norm transformer layer over all rows of `x` under `blocked`
    /// (n rows by `cols` logits per row). Returns the new hidden states and
    /// the number of degenerate attention rows.
    #[allow(clippy::too_many_arguments)]
    fn layer_full(
        &self,
        tape: &mut Tape,
        ids: &[BufId],
        layer: &LayerIdx,
        x: BufId,
        blocked: &[bool],
        cols: usize,
        n: usize,
    ) -> Result<(BufId, usize)> {
        let d = self.config.d;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let xn = tape.layer_norm(x, ids[layer.ln1_g], ids[layer.ln1_b])?;
        let q = {
            let p = tape.matmul(xn, ids[layer.wq])?;
            tape.add_row_vec(p, ids[layer.bq])?
        };
        let (k, v) = self.keys_values(tape, ids, layer, xn)?;

        let mut head_outs = Vec::with_capacity(heads);
        let mut degenerate = 0usize;
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let buckets = Arc::new(self.bias_buckets_matrix(n, cols, h));
            let biased = tape.add_indexed_bias(scaled, ids[self.idx.rel_bias], buckets)?;
            let (weights, degenerate_rows) = tape.masked_softmax(biased, blocked)?;
            degenerate += degenerate_rows.iter().filter(|&&b| b).count();
            head_outs.push(tape.matmul(weights, vh)?);
        }
        let cat = tape.concat_cols(&head_outs)?;
        let proj = tape.matmul(cat, ids[layer.wo])?;
        let proj = tape.add_row_vec(proj, ids[layer.bo])?;
        let x = tape.add(x, proj)?;

        let xn2 = tape.layer_norm(x, ids[layer.ln2_g], ids[layer.ln2_b])?;
        let f1 = tape.matmul(xn2, ids[layer.w1])?;
        let f1 = tape.add_row_vec(f1, ids[layer.b1])?;
        let f1 = tape.gelu(f1);
        let f2 = tape.matmul(f1, ids[layer.w2])?;
        let f2 = tape.add_row_vec(f2, ids[layer.b2])?;
        Ok((tape.add(x, f2)?, degenerate))
    }

    /// Normalized keys and values over `xn` rows, with the null token's
    /// key/value appended as the final row when enabled.
    fn keys_values(
        &self,
        tape: &mut Tape,
        ids: &[BufId],
        layer: &LayerIdx,
        xn: BufId,
    ) -> Result<(BufId, BufId)> {
        let source = if let Some(null_ix) = self.idx.null_token {
            let nn = tape.layer_norm(ids[null_ix], ids[layer.ln1_g], ids[layer.ln1_b])?;
            tape.concat_rows(&[xn, nn])?
        } else {
            xn
        };
        let k = tape.matmul(source, ids[layer.wk])?;
        let v = tape.matmul(source, ids[layer.wv])?;
        let v = tape.add_row_vec(v, ids[layer.bv])?;
        Ok((k, v))
    }

    // ── public forward passes ────────────────────────────────────

    /// Contextualized hidden states for an item sequence under a combined
    /// mask (which must include the causal source). Returns (H, degenerate
    /// row count).
    pub fn encode_sequence(
        &self,
        tape: &mut Tape,
        ids: &[BufId],
        items: &[&Item],
        mask: &AttentionMask,
    ) -> Result<(BufId, usize)> {
        let n = items.len();
        if n == 0 {
            return Err(Error::Config("encode_sequence on an empty sequence".into()));
        }
        if n > self.config.max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {} exceeds max_seq_len {}",
                n, self.config.max_seq_len
            )));
        }
        if mask.len() != n {
            return Err(Error::Config(format!(
                "mask length {} does not match sequence length {}",
                mask.len(),
                n
            )));
        }
        if !mask.provenance().contains(&MaskSource::Causal) {
            return Err(Error::Config("encode_sequence requires a causal mask source".into()));
        }
        let (blocked, cols) = self.extend_blocked(mask);
        let mut x = self.fuse_items(tape, ids, items)?;
        let mut degenerate = 0;
        for layer in &self.idx.backbone {
            let (nx, deg) = self.layer_full(tape, ids, layer, x, &blocked, cols, n)?;
            x = nx;
            degenerate += deg;
        }
        if degenerate > 0 && !self.config.null_token_enabled {
            self.degenerate_row_warnings.fetch_add(degenerate as u64, Ordering::Relaxed);
        }
        Ok((x, degenerate))
    }

    /// Branch k (1-based) applied to backbone outputs under `branch_mask`.
    ///
    /// The query is the hidden state at the last key position the mask
    /// leaves open; with every position blocked the learned null token
    /// becomes the query (when enabled). An optional condition embedding is
    /// summed into the query input. Returns the step representation (1 x d).
    pub fn branch_forward(
        &self,
        tape: &mut Tape,
        ids: &[BufId],
        h: BufId,
        k: usize,
        branch_mask: &AttentionMask,
        condition: Option<u32>,
    ) -> Result<BufId> {
        if k < 1 || k > self.config.num_branches {
            return Err(Error::Config(format!(
                "branch index {} out of range 1..={}",
                k, self.config.num_branches
            )));
        }
        let n = branch_mask.len();
        if tape.shape(h) != [n, self.config.d] {
            return Err(Error::Config(format!(
                "branch_forward: H has shape {:?}, expected [{}, {}]",
                tape.shape(h),
                n,
                self.config.d
            )));
        }
        if condition.is_some() && !self.config.condition_embedding_enabled {
            return Err(Error::Config(
                "condition passed but condition embeddings are disabled".into(),
            ));
        }
        let layer = self.idx.branches[k - 1].clone();
        let d = self.config.d;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // query row: last open key position in the final row's mask
        let q_pos = branch_mask.last_open_col(n - 1);
        if q_pos.is_none() && !self.config.null_token_enabled {
            self.degenerate_row_warnings.fetch_add(1, Ordering::Relaxed);
        }

        let xn = tape.layer_norm(h, ids[layer.ln1_g], ids[layer.ln1_b])?;
        let (residual, q_in) = match q_pos {
            Some(p) => (tape.slice_rows(h, p, 1)?, tape.slice_rows(xn, p, 1)?),
            None => {
                let null_ix = self.idx.null_token.ok_or_else(|| {
                    Error::Config("all positions blocked and null token disabled".into())
                })?;
                let nn = tape.layer_norm(ids[null_ix], ids[layer.ln1_g], ids[layer.ln1_b])?;
                (ids[null_ix], nn)
            }
        };
        let q_in = match condition {
            Some(c) => {
                let cond_ix = self.idx.cond_embed.ok_or_else(|| {
                    Error::Config("condition embeddings are not allocated".into())
                })?;
                if c >= self.config.condition_vocab {
                    return Err(Error::Data(format!(
                        "condition {} outside vocab {}",
                        c, self.config.condition_vocab
                    )));
                }
                let ce = tape.gather(ids[cond_ix], Arc::new(vec![c as usize]))?;
                tape.add(q_in, ce)?
            }
            None => q_in,
        };
        let q = {
            let p = tape.matmul(q_in, ids[layer.wq])?;
            tape.add_row_vec(p, ids[layer.bq])?
        };
        let (key, value) = self.keys_values(tape, ids, &layer, xn)?;

        // single-query blocked row, extended for the null column
        let row = branch_mask.blocked_row(n - 1);
        let cols = if self.config.null_token_enabled { n + 1 } else { n };
        let mut blocked_row = Vec::with_capacity(cols);
        blocked_row.extend_from_slice(row);
        if self.config.null_token_enabled {
            blocked_row.push(false);
        }

        let q_row_index = q_pos.unwrap_or(n - 1);
        let mut head_outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(key, hd * dh, dh)?;
            let vh = tape.slice_cols(value, hd * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let buckets = {
                let full = self.bias_buckets_matrix(n, cols, hd);
                Arc::new(full[q_row_index * cols..(q_row_index + 1) * cols].to_vec())
            };
            let biased = tape.add_indexed_bias(scaled, ids[self.idx.rel_bias], buckets)?;
            let (weights, _) = tape.masked_softmax(biased, &blocked_row)?;
            head_outs.push(tape.matmul(weights, vh)?);
        }
        let cat = tape.concat_cols(&head_outs)?;
        let proj = tape.matmul(cat, ids[layer.wo])?;
        let proj = tape.add_row_vec(proj, ids[layer.bo])?;
        let x = tape.add(residual, proj)?;

        let xn2 = tape.layer_norm(x, ids[layer.ln2_g], ids[layer.ln2_b])?;
        let f1 = tape.matmul(xn2, ids[layer.w1])?;
        let f1 = tape.add_row_vec(f1, ids[layer.b1])?;
        let f1 = tape.gelu(f1);
        let f2 = tape.matmul(f1, ids[layer.w2])?;
        let f2 = tape.add_row_vec(f2, ids[layer.b2])?;
        tape.add(x, f2)
    }

    /// Inner-product score between a step representation and an item
    /// embedding, both 1 x d buffers.
    pub fn score(&self, tape: &mut Tape, h: BufId, item_embedding: BufId) -> Result<BufId> {
        tape.dot(h, item_embedding)
    }

    // ── checkpointing ────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, tensor) in self.params.iter() {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data(format!("{}: not a checkpoint", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} unsupported (expected {})",
                version, CHECKPOINT_VERSION
            )));
        }
        let cfg_len = read_u64(&mut r)? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)?;
        let config: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
        let mut model = Model::new(config)?;
        let count = read_u64(&mut r)? as usize;
        if count != model.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, config implies {}",
                count,
                model.params.len()
            )));
        }
        for i in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Data("checkpoint tensor name is not utf-8".into()))?;
            if name != model.params.name(i) {
                return Err(Error::Data(format!(
                    "checkpoint tensor '{}' does not match expected '{}'",
                    name,
                    model.params.name(i)
                )));
            }
            let ndims = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(read_u64(&mut r)? as usize);
            }
            if shape != model.params.tensor(i).shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor '{}' shape {:?} does not match {:?}",
                    name,
                    shape,
                    model.params.tensor(i).shape()
                )));
            }
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; numel * 8];
            r.read_exact(&mut buf)?;
            let data = model.params.tensor_mut(i).data_mut();
            for (j, chunk) in buf.chunks_exact(8).enumerate() {
                data[j] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok(model)
    }

    /// Load a checkpoint and reject it unless its config equals `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Model> {
        let model = Model::load(path)?;
        if &model.config != expected {
            return Err(Error::Config(format!(
                "checkpoint config mismatch at {}",
                path.display()
            )));
        }
        Ok(model)
    }
}

/// Bucketed relative-position distance: exact for short distances,
/// log-spaced out to 256, clamped beyond. Stand-in for an externally defined
/// bias adjustment; isolated here so it can be swapped.
pub fn relative_bucket(distance: usize, num_buckets: usize) -> usize {
    let exact = num_buckets / 2;
    if distance < exact {
        return distance;
    }
    let max_distance = 256.0_f64;
    let log_pos = (distance as f64 / exact as f64).ln() / (max_distance / exact as f64).ln();
    let bucket = exact + (log_pos * (num_buckets - exact) as f64) as usize;
    bucket.min(num_buckets - 1)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
