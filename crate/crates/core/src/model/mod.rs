//! Plain multi-layer transformer over the multi-track layout: patch
//! embedding, interleaved window/global attention blocks and a logit head
//! scoring hidden states against the task's dynamic vocabulary.

mod config;
mod infer;

use std::rc::Rc;

use rand::Rng;

pub use config::ModelConfig;
pub use infer::{DecodeSession, TrackState};

use crate::autograd::{Graph, Var};
use crate::error::{Result, UliError};
use crate::geometry::Point;
use crate::image::Image;
use crate::params::{normal_matrix, LrGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::task::{TaskSpec, MAX_INSTRUCTION};
use crate::template::{bilinear_weights, AttentionMask, TrackLayout, WindowMap};
use crate::tensor::{KeyLists, Matrix, RowMix};
use crate::vocab::{OovComposer, TokenId, Tokenizer, Vocabulary, MAX_CONCEPT_PIECES};

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Ids {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_row: ParamId,
    pub pos_col: ParamId,
    pub pos_instr: ParamId,
    pub pos_track: ParamId,
    pub text: ParamId,
    pub comp_pos: ParamId,
    pub comp_wq: ParamId,
    pub comp_wk: ParamId,
    pub comp_wv: ParamId,
    pub comp_wo: ParamId,
    pub coord: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_g: ParamId,
    pub final_b: ParamId,
}

impl Ids {
    fn resolve<T: Scalar>(p: &ParamStore<T>, layers: usize) -> Result<Self> {
        let id = |n: &str| p.id(n).ok_or_else(|| UliError::Checkpoint(format!("missing parameter {n}")));
        let layer = |i: usize| -> Result<LayerIds> {
            let l = |n: &str| id(&format!("layers.{i}.{n}"));
            Ok(LayerIds {
                ln1_g: l("ln1.g")?,
                ln1_b: l("ln1.b")?,
                wq: l("attn.wq")?,
                bq: l("attn.bq")?,
                wk: l("attn.wk")?,
                bk: l("attn.bk")?,
                wv: l("attn.wv")?,
                bv: l("attn.bv")?,
                wo: l("attn.wo")?,
                bo: l("attn.bo")?,
                ln2_g: l("ln2.g")?,
                ln2_b: l("ln2.b")?,
                w1: l("mlp.w1")?,
                b1: l("mlp.b1")?,
                w2: l("mlp.w2")?,
                b2: l("mlp.b2")?,
            })
        };
        Ok(Ids {
            patch_w: id("patch.w")?,
            patch_b: id("patch.b")?,
            pos_row: id("pos.row")?,
            pos_col: id("pos.col")?,
            pos_instr: id("pos.instruction")?,
            pos_track: id("pos.track")?,
            text: id("text.embed")?,
            comp_pos: id("composer.pos")?,
            comp_wq: id("composer.wq")?,
            comp_wk: id("composer.wk")?,
            comp_wv: id("composer.wv")?,
            comp_wo: id("composer.wo")?,
            coord: id("coord.embed")?,
            layers: (0..layers).map(layer).collect::<Result<_>>()?,
            final_g: id("final.ln.g")?,
            final_b: id("final.ln.b")?,
        })
    }
}

/// Longest response any task decodes (instance segmentation).
pub const MAX_STEPS: usize = 31;

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub(crate) ids: Ids,
}

/// Inputs of one full (non-incremental) forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInput<'a> {
    pub task: &'a TaskSpec,
    pub image: &'a Image,
    pub instruction: &'a [TokenId],
    /// Anchor of each track, in layout order.
    pub points: &'a [Point],
    /// Response tokens fed as inputs, `steps` per track.
    pub responses: &'a [Vec<TokenId>],
}

/// Result of a graph forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Final-normalized hidden states, one row per layout position.
    pub hidden: Var,
    /// Embedding matrix of the task vocabulary, one row per token id.
    pub vocab: Var,
    pub layout: TrackLayout,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let s = config.init_std;
        let mut p = ParamStore::new();
        let o = LrGroup::Other;
        let patch_in = config.patch * config.patch * 3;
        p.add("patch.w", normal_matrix(rng, patch_in, d, s), true, o);
        p.add("patch.b", Matrix::zeros(1, d), false, o);
        p.add("pos.row", normal_matrix(rng, config.max_grid, d, s), false, o);
        p.add("pos.col", normal_matrix(rng, config.max_grid, d, s), false, o);
        p.add("pos.instruction", normal_matrix(rng, MAX_INSTRUCTION, d, s), false, o);
        p.add("pos.track", normal_matrix(rng, MAX_STEPS + 2, d, s), false, o);
        let text = normal_matrix(rng, config.text_vocab, d, config.embed_std);
        let comp = OovComposer::init(rng, text);
        p.add("text.embed", comp.text_embed, false, o);
        p.add("composer.pos", comp.pos_embed, false, o);
        p.add("composer.wq", comp.wq, true, o);
        p.add("composer.wk", comp.wk, true, o);
        p.add("composer.wv", comp.wv, true, o);
        p.add("composer.wo", comp.wo, true, o);
        p.add("coord.embed", normal_matrix(rng, config.max_coord_bins, d, config.embed_std), false, o);
        let h = d * config.mlp_ratio;
        for i in 0..config.layers() {
            let g = LrGroup::Layer(i);
            let n = |x: &str| format!("layers.{i}.{x}");
            p.add(n("ln1.g"), Matrix::from_fn(1, d, |_, _| T::one()), false, g);
            p.add(n("ln1.b"), Matrix::zeros(1, d), false, g);
            for w in ["wq", "wk", "wv", "wo"] {
                p.add(n(&format!("attn.{w}")), normal_matrix(rng, d, d, s), true, g);
                p.add(n(&format!("attn.b{}", &w[1..])), Matrix::zeros(1, d), false, g);
            }
            p.add(n("ln2.g"), Matrix::from_fn(1, d, |_, _| T::one()), false, g);
            p.add(n("ln2.b"), Matrix::zeros(1, d), false, g);
            p.add(n("mlp.w1"), normal_matrix(rng, d, h, s), true, g);
            p.add(n("mlp.b1"), Matrix::zeros(1, h), false, g);
            p.add(n("mlp.w2"), normal_matrix(rng, h, d, s), true, g);
            p.add(n("mlp.b2"), Matrix::zeros(1, d), false, g);
        }
        p.add("final.ln.g", Matrix::from_fn(1, d, |_, _| T::one()), false, o);
        p.add("final.ln.b", Matrix::zeros(1, d), false, o);
        Self::from_params(config, p)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let ids = Ids::resolve(&params, config.layers())?;
        Ok(Self { config, params, ids })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), ids: self.ids.clone() }
    }

    /// Snapshot of the concept composer, for building standalone vocabularies.
    pub fn composer(&self) -> OovComposer<T> {
        let v = |id| self.params.value(id).clone();
        OovComposer {
            text_embed: v(self.ids.text),
            pos_embed: v(self.ids.comp_pos),
            wq: v(self.ids.comp_wq),
            wk: v(self.ids.comp_wk),
            wv: v(self.ids.comp_wv),
            wo: v(self.ids.comp_wo),
        }
    }

    /// Parameters inside the transformer layer stack.
    pub fn layer_param_count(&self) -> usize {
        self.params.iter().filter(|(_, p)| matches!(p.group, LrGroup::Layer(_))).map(|(_, p)| p.value.data.len()).sum()
    }

    fn check_image(&self, task: &TaskSpec, image: &Image) -> Result<()> {
        if image.width != task.resolution || image.height != task.resolution {
            return Err(UliError::LayoutMismatch(format!(
                "{}×{} image for a {} px task",
                image.width, image.height, task.resolution
            )));
        }
        if task.patch != self.config.patch {
            return Err(UliError::LayoutMismatch(format!(
                "task patch {} differs from model patch {}",
                task.patch, self.config.patch
            )));
        }
        let g = task.patch_grid();
        if g > self.config.max_grid {
            return Err(UliError::GeometryError(format!("patch grid {g} exceeds position table {}", self.config.max_grid)));
        }
        Ok(())
    }

    /// Patch tokens (projection plus 2-D position) in raster order.
    pub fn embed_image(&self, g: &mut Graph<'_, T>, image: &Image) -> Result<Var> {
        let p = self.config.patch;
        let (gw, gh, data) = image.patchify(p)?;
        if gw.max(gh) > self.config.max_grid {
            return Err(UliError::GeometryError(format!("patch grid {gw}×{gh} exceeds {}", self.config.max_grid)));
        }
        let patches = g.constant(Matrix::from_vec(gw * gh, p * p * 3, data.iter().map(|&v| T::of(v as f64)).collect()));
        let w = g.param(self.ids.patch_w);
        let b = g.param(self.ids.patch_b);
        let proj = g.matmul(patches, w);
        let proj = g.add_row(proj, b);
        let rows = g.param(self.ids.pos_row);
        let cols = g.param(self.ids.pos_col);
        let table = g.concat(&[rows, cols]);
        let mut mix = RowMix::new();
        let mg = self.config.max_grid;
        for r in 0..gh {
            for c in 0..gw {
                mix.push_row(&[(r, T::one()), (mg + c, T::one())]);
            }
        }
        let pos = g.row_mix(table, Rc::new(mix));
        Ok(g.add(proj, pos))
    }

    /// Plain patch embedding without a tape.
    pub fn patch_embed(&self, image: &Image) -> Result<Matrix<T>> {
        let mut g = Graph::new(&self.params);
        let v = self.embed_image(&mut g, image)?;
        Ok(g.value(v).clone())
    }

    /// Task vocabulary embeddings (one row per id) and the task-identifier
    /// embedding, both recomputed from the current weights.
    pub fn embed_vocabulary(&self, g: &mut Graph<'_, T>, task: &TaskSpec, vocab: &Vocabulary<T>) -> Result<(Var, Var)> {
        let base = vocab.base_len();
        if base != self.config.text_vocab {
            return Err(UliError::LayoutMismatch(format!(
                "vocabulary has {base} base entries, model {}",
                self.config.text_vocab
            )));
        }
        if vocab.coord_bins() > self.config.max_coord_bins {
            return Err(UliError::LayoutMismatch(format!(
                "{} coordinate bins exceed the table of {}",
                vocab.coord_bins(),
                self.config.max_coord_bins
            )));
        }
        let prompt = vocab.tokenizer().tokenize(task.kind.prompt())?;
        let mut items: Vec<&[TokenId]> = vocab.concepts().iter().map(|c| c.pieces.as_slice()).collect();
        items.push(&prompt);
        let te = g.param(self.ids.text);
        // multi-piece items go through the composer; single pieces are raw rows
        let multi: Vec<usize> = (0..items.len()).filter(|&i| items[i].len() > 1).collect();
        let composed = if multi.is_empty() {
            None
        } else {
            let pos = g.param(self.ids.comp_pos);
            let table = g.concat(&[te, pos]);
            let mut mix = RowMix::new();
            let mut keys = KeyLists::new();
            let mut firsts = Vec::new();
            let mut row = 0;
            for &i in &multi {
                crate::vocab::validate_pieces(items[i], base)?;
                let n = items[i].len();
                debug_assert!(n <= MAX_CONCEPT_PIECES);
                for (j, p) in items[i].iter().enumerate() {
                    mix.push_row(&[(p.0, T::one()), (base + j, T::one())]);
                }
                for _ in 0..n {
                    keys.push_query(row..row + n);
                }
                firsts.push(row);
                row += n;
            }
            let x = g.row_mix(table, Rc::new(mix));
            let (wq, wk, wv, wo) = (
                g.param(self.ids.comp_wq),
                g.param(self.ids.comp_wk),
                g.param(self.ids.comp_wv),
                g.param(self.ids.comp_wo),
            );
            let q = g.matmul(x, wq);
            let k = g.matmul(x, wk);
            let v = g.matmul(x, wv);
            let a = g.attention(q, k, v, 1, Rc::new(keys));
            let first = g.gather(a, &firsts);
            Some(g.matmul(first, wo))
        };
        let coord = g.param(self.ids.coord);
        let mut parts = vec![te];
        parts.extend(composed);
        parts.push(coord);
        let source = g.concat(&parts);
        let coord_start = base + multi.len();
        let row_of = |i: usize| match multi.iter().position(|&m| m == i) {
            Some(j) => base + j,
            None => items[i][0].0,
        };
        let mut mix = RowMix::new();
        for t in 0..base {
            mix.push_row(&[(t, T::one())]);
        }
        let n = vocab.concepts().len();
        for c in 0..n {
            mix.push_row(&[(row_of(c), T::one())]);
        }
        let neg = -T::one() / T::of(n.max(1) as f64);
        let bg: Vec<(usize, T)> = (0..n).map(|c| (row_of(c), neg)).collect();
        mix.push_row(&bg);
        for b in 0..vocab.coord_bins() {
            mix.push_row(&[(coord_start + b, T::one())]);
        }
        debug_assert_eq!(mix.out_rows(), vocab.len());
        let table = g.row_mix(source, Rc::new(mix));
        let task_row = g.gather(source, &[row_of(n)]);
        Ok((table, task_row))
    }

    /// Key lists of a window layer, a global layer and the shared-only
    /// global update used in accelerated mode.
    pub fn attention_patterns(&self, task: &TaskSpec, layout: &TrackLayout, points: &[Point]) -> [Rc<KeyLists>; 3] {
        let text = self.config.text_conditioning && layout.instruction_len > 0;
        let mask = AttentionMask::new(layout.clone(), text);
        let windows = WindowMap::new(task, points);
        let shared = AttentionMask::new(TrackLayout::new(layout.image_len, layout.instruction_len, 0, layout.steps), text);
        [Rc::new(mask.key_lists(Some(&windows))), Rc::new(mask.key_lists(None)), Rc::new(shared.key_lists(None))]
    }

    fn block(&self, g: &mut Graph<'_, T>, l: usize, x: Var, keys: Rc<KeyLists>) -> Var {
        let ids = &self.ids.layers[l];
        let p = |g: &mut Graph<'_, T>, id| g.param(id);
        let (g1, b1) = (p(g, ids.ln1_g), p(g, ids.ln1_b));
        let h = g.layer_norm(x, g1, b1);
        let lin = |g: &mut Graph<'_, T>, x, w, b| {
            let w = g.param(w);
            let b = g.param(b);
            let y = g.matmul(x, w);
            g.add_row(y, b)
        };
        let q = lin(g, h, ids.wq, ids.bq);
        let k = lin(g, h, ids.wk, ids.bk);
        let v = lin(g, h, ids.wv, ids.bv);
        let a = g.attention(q, k, v, self.config.heads, keys);
        let o = lin(g, a, ids.wo, ids.bo);
        let x = g.add(x, o);
        let (g2, b2) = (p(g, ids.ln2_g), p(g, ids.ln2_b));
        let h = g.layer_norm(x, g2, b2);
        let m = lin(g, h, ids.w1, ids.b1);
        let m = g.gelu(m);
        let m = lin(g, m, ids.w2, ids.b2);
        g.add(x, m)
    }

    /// Full forward pass over a multi-track layout.
    pub fn forward(&self, g: &mut Graph<'_, T>, vocab: &Vocabulary<T>, input: ForwardInput<'_>) -> Result<Forward> {
        let task = input.task;
        self.check_image(task, input.image)?;
        if input.points.len() != input.responses.len() {
            return Err(UliError::LayoutMismatch(format!(
                "{} anchors for {} responses",
                input.points.len(),
                input.responses.len()
            )));
        }
        if let Some(r) = input.responses.iter().find(|r| r.len() != task.steps()) {
            return Err(UliError::LayoutMismatch(format!("response of {} tokens for {} steps", r.len(), task.steps())));
        }
        let steps = task.steps();
        let gs = task.patch_grid();
        let instruction = &input.instruction[..input.instruction.len().min(MAX_INSTRUCTION)];
        let layout = TrackLayout::new(gs * gs, instruction.len(), input.points.len(), steps);

        let image = self.embed_image(g, input.image)?;
        let (table, task_row) = self.embed_vocabulary(g, task, vocab)?;
        let track_pos = g.param(self.ids.pos_track);
        let instr_pos = g.param(self.ids.pos_instr);
        let mut bil = RowMix::new();
        for &pt in input.points {
            let w: Vec<(usize, T)> = bilinear_weights(pt, task.patch, gs, gs).into_iter().map(|(i, w)| (i, T::of(w))).collect();
            bil.push_row(&w);
        }
        let local = g.row_mix(image, Rc::new(bil));
        let source = g.concat(&[image, local, table, task_row, track_pos, instr_pos]);
        let (o_local, o_table) = (layout.image_len, layout.image_len + input.points.len());
        let o_task = o_table + vocab.len();
        let o_tpos = o_task + 1;
        let o_ipos = o_tpos + MAX_STEPS + 2;
        let one = T::one();
        let mut mix = RowMix::new();
        for i in 0..layout.image_len {
            mix.push_row(&[(i, one)]);
        }
        for (i, tok) in instruction.iter().enumerate() {
            if tok.0 >= vocab.base_len() {
                return Err(UliError::LayoutMismatch(format!("instruction token {} outside the text table", tok.0)));
            }
            mix.push_row(&[(o_table + tok.0, one), (o_ipos + i, one)]);
        }
        for (t, resp) in input.responses.iter().enumerate() {
            mix.push_row(&[(o_local + t, one), (o_tpos, one)]);
            mix.push_row(&[(o_task, one), (o_tpos + 1, one)]);
            for (s, tok) in resp.iter().enumerate() {
                if tok.0 >= vocab.len() {
                    return Err(UliError::LayoutMismatch(format!("response token {} outside vocabulary", tok.0)));
                }
                mix.push_row(&[(o_table + tok.0, one), (o_tpos + 2 + s, one)]);
            }
        }
        debug_assert_eq!(mix.out_rows(), layout.total_len());
        let mut x = g.row_mix(source, Rc::new(mix));

        let [window, global, shared] = self.attention_patterns(task, &layout, input.points);
        let s = layout.shared_len();
        let all: Vec<usize> = (0..layout.total_len()).collect();
        for l in 0..self.config.layers() {
            if self.config.is_global(l) && self.config.accelerated {
                let head = g.gather(x, &all[..s]);
                let head = self.block(g, l, head, shared.clone());
                if s == layout.total_len() {
                    x = head;
                } else {
                    let tail = g.gather(x, &all[s..]);
                    x = g.concat(&[head, tail]);
                }
            } else {
                let keys = if self.config.is_global(l) { global.clone() } else { window.clone() };
                x = self.block(g, l, x, keys);
            }
        }
        let fg = g.param(self.ids.final_g);
        let fb = g.param(self.ids.final_b);
        let hidden = g.layer_norm(x, fg, fb);
        Ok(Forward { hidden, vocab: table, layout })
    }

    /// Scores `⟨h, e⟩ / √D` of the given positions against a contiguous
    /// vocabulary range.
    pub fn slice_logits(
        &self,
        g: &mut Graph<'_, T>,
        fwd: &Forward,
        positions: &[usize],
        range: std::ops::Range<usize>,
    ) -> Result<Var> {
        if range.is_empty() {
            return Err(UliError::ScheduleViolation { step: 0, token: range.start, expected: "non-empty slice".into() });
        }
        let h = g.gather(fwd.hidden, positions);
        let cols: Vec<usize> = range.collect();
        let e = g.gather(fwd.vocab, &cols);
        let raw = g.matmul_nt(h, e);
        Ok(g.scale(raw, T::one() / T::of(self.config.dim as f64).sqrt()))
    }
}

/// Plain-matrix logits for one hidden row.
pub fn logits<T: Scalar>(hidden: &[T], vocab_table: &Matrix<T>, range: std::ops::Range<usize>) -> Result<Vec<T>> {
    if range.is_empty() {
        return Err(UliError::ScheduleViolation { step: 0, token: range.start, expected: "non-empty slice".into() });
    }
    let scale = T::one() / T::of(hidden.len() as f64).sqrt();
    Ok(range.map(|r| crate::scalar::dot(hidden, vocab_table.row(r)) * scale).collect())
}

/// Token table size of the built-in tokenizer.
pub fn builtin_text_vocab() -> usize {
    Tokenizer::builtin().len()
}
