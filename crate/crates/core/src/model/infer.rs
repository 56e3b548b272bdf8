//! Incremental inference: the shared observation runs through the stack
//! once and its keys/values are cached per layer; tracks then advance a few
//! positions at a time against that cache plus their own cached prefix.

use crate::autograd::Graph;
use crate::error::{Result, UliError};
use crate::geometry::Point;
use crate::image::Image;
use crate::scalar::Scalar;
use crate::task::{TaskSpec, MAX_INSTRUCTION};
use crate::template::{bilinear_weights, AttentionMask, TrackLayout, WindowMap};
use crate::tensor::{attention_forward, gelu, layer_norm_forward, KeyLists, Matrix};
use crate::vocab::{TokenId, Vocabulary};

use super::Model;

/// Cached rows of one track (or beam hypothesis).
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub point: Point,
    pub window: usize,
    /// Cache row of each track position, in local order.
    pub rows: Vec<usize>,
}

pub struct DecodeSession<'m, T: Scalar> {
    model: &'m Model<T>,
    pub task: TaskSpec,
    vocab_table: Matrix<T>,
    task_row: Vec<T>,
    image: Matrix<T>,
    grid_side: usize,
    image_len: usize,
    shared_len: usize,
    image_window: Vec<usize>,
    caches: Vec<(Matrix<T>, Matrix<T>)>,
    track_rows: usize,
    invocations: usize,
}

fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut y = x.matmul(w);
    y.add_row_assign(&b.data);
    y
}

fn norm<T: Scalar>(x: &Matrix<T>, g: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    layer_norm_forward(x, &g.data, &b.data).0
}

impl<'m, T: Scalar> DecodeSession<'m, T> {
    /// Embeds the vocabulary and image and runs the shared observation
    /// through every layer.
    pub fn new(
        model: &'m Model<T>,
        task: &TaskSpec,
        vocab: &Vocabulary<T>,
        image: &Image,
        instruction: &[TokenId],
    ) -> Result<Self> {
        model.check_image(task, image)?;
        let instruction = &instruction[..instruction.len().min(MAX_INSTRUCTION)];
        let (image_emb, vocab_table, task_row) = {
            let mut g = Graph::new(&model.params);
            let img = model.embed_image(&mut g, image)?;
            let (table, task_row) = model.embed_vocabulary(&mut g, task, vocab)?;
            (g.value(img).clone(), g.value(table).clone(), g.value(task_row).data.clone())
        };
        let gs = task.patch_grid();
        let layout = TrackLayout::new(gs * gs, instruction.len(), 0, task.steps());
        let mut x = image_emb.clone();
        let ipos = model.params.value(model.ids.pos_instr);
        for (i, tok) in instruction.iter().enumerate() {
            if tok.0 >= vocab.base_len() {
                return Err(UliError::LayoutMismatch(format!("instruction token {} outside the text table", tok.0)));
            }
            let row: Vec<T> = vocab_table.row(tok.0).iter().zip(ipos.row(i)).map(|(a, b)| *a + *b).collect();
            x.append_rows(&Matrix::row_vector(row));
        }
        let windows = WindowMap::new(task, &[]);
        let text = model.config.text_conditioning && !instruction.is_empty();
        let mask = AttentionMask::new(layout.clone(), text);
        let (win, glob) = (mask.key_lists(Some(&windows)), mask.key_lists(None));
        let mut session = Self {
            model,
            task: task.clone(),
            vocab_table,
            task_row,
            image: image_emb,
            grid_side: gs,
            image_len: layout.image_len,
            shared_len: layout.shared_len(),
            image_window: windows.image_window,
            caches: vec![(Matrix::zeros(0, model.config.dim), Matrix::zeros(0, model.config.dim)); model.config.layers()],
            track_rows: 0,
            invocations: 0,
        };
        for l in 0..model.config.layers() {
            let keys = if model.config.is_global(l) { &glob } else { &win };
            x = session.block(l, &x, keys);
        }
        Ok(session)
    }

    pub fn vocab_table(&self) -> &Matrix<T> {
        &self.vocab_table
    }

    /// Number of track advances so far.
    pub fn invocations(&self) -> usize {
        self.invocations
    }

    fn block(&mut self, l: usize, x: &Matrix<T>, keys: &KeyLists) -> Matrix<T> {
        let ids = &self.model.ids.layers[l];
        let v = |id| self.model.params.value(id);
        let h = norm(x, v(ids.ln1_g), v(ids.ln1_b));
        let q = linear(&h, v(ids.wq), v(ids.bq));
        let k = linear(&h, v(ids.wk), v(ids.bk));
        let val = linear(&h, v(ids.wv), v(ids.bv));
        let cache = &mut self.caches[l];
        cache.0.append_rows(&k);
        cache.1.append_rows(&val);
        let (a, _) = attention_forward(&q, &cache.0, &cache.1, self.model.config.heads, keys);
        let mut out = x.clone();
        out.add_assign(&linear(&a, v(ids.wo), v(ids.bo)));
        let h = norm(&out, v(ids.ln2_g), v(ids.ln2_b));
        let m = linear(&h, v(ids.w1), v(ids.b1)).map(gelu);
        out.add_assign(&linear(&m, v(ids.w2), v(ids.b2)));
        out
    }

    fn track_pos(&self, local: usize) -> &[T] {
        self.model.params.value(self.model.ids.pos_track).row(local)
    }

    /// Opens one track per point: feeds the local feature and the task
    /// identifier, returning the hidden state that predicts step 0.
    pub fn start_tracks(&mut self, points: &[Point]) -> Result<(Vec<TrackState>, Matrix<T>)> {
        let windows = WindowMap::new(&self.task, points);
        let mut tracks = Vec::with_capacity(points.len());
        let mut x = Matrix::zeros(0, self.model.config.dim);
        for (t, &p) in points.iter().enumerate() {
            let mut local = vec![T::zero(); self.model.config.dim];
            for (idx, w) in bilinear_weights(p, self.task.patch, self.grid_side, self.grid_side) {
                crate::scalar::axpy(T::of(w), self.image.row(idx), &mut local);
            }
            let r0: Vec<T> = local.iter().zip(self.track_pos(0)).map(|(a, b)| *a + *b).collect();
            let r1: Vec<T> = self.task_row.iter().zip(self.track_pos(1)).map(|(a, b)| *a + *b).collect();
            x.append_rows(&Matrix::from_vec(2, r0.len(), [r0, r1].concat()));
            tracks.push(TrackState { point: p, window: windows.track_window[t], rows: Vec::new() });
        }
        let hidden = self.advance(&mut tracks, x, 2);
        Ok((tracks, hidden))
    }

    /// Feeds one token per track; returns the hidden state predicting the
    /// next step of each.
    pub fn step(&mut self, tracks: &mut [TrackState], tokens: &[TokenId]) -> Result<Matrix<T>> {
        assert_eq!(tracks.len(), tokens.len());
        let mut x = Matrix::zeros(0, self.model.config.dim);
        for (tr, tok) in tracks.iter().zip(tokens) {
            let local = tr.rows.len();
            if local > self.task.steps() + 1 {
                return Err(UliError::LayoutMismatch(format!("track already holds {local} positions")));
            }
            if tok.0 >= self.vocab_table.rows {
                return Err(UliError::LayoutMismatch(format!("token {} outside vocabulary", tok.0)));
            }
            let row: Vec<T> = self.vocab_table.row(tok.0).iter().zip(self.track_pos(local)).map(|(a, b)| *a + *b).collect();
            x.append_rows(&Matrix::row_vector(row));
        }
        Ok(self.advance(tracks, x, 1))
    }

    fn advance(&mut self, tracks: &mut [TrackState], mut x: Matrix<T>, m: usize) -> Matrix<T> {
        let base = self.shared_len + self.track_rows;
        let mut win = KeyLists::new();
        let mut glob = KeyLists::new();
        for (t, tr) in tracks.iter_mut().enumerate() {
            let first_new = tr.rows.len();
            tr.rows.extend((0..m).map(|j| base + t * m + j));
            for local in first_new..first_new + m {
                let own = tr.rows[..=local].iter().copied();
                let image = (0..self.image_len).filter(|&k| self.image_window[k] == tr.window);
                win.push_query(image.chain(self.image_len..self.shared_len).chain(own.clone()));
                glob.push_query((0..self.shared_len).chain(own));
            }
        }
        let cfg = &self.model.config;
        for l in 0..cfg.layers() {
            let global = cfg.is_global(l);
            if global && cfg.accelerated {
                continue;
            }
            x = self.block(l, &x, if global { &glob } else { &win });
        }
        self.track_rows += tracks.len() * m;
        self.invocations += 1;
        let ids = &self.model.ids;
        let h = norm(&x, self.model.params.value(ids.final_g), self.model.params.value(ids.final_b));
        let last: Vec<usize> = (0..tracks.len()).map(|t| t * m + m - 1).collect();
        h.select_rows(&last)
    }

    pub fn logits(&self, hidden: &[T], range: std::ops::Range<usize>) -> Result<Vec<T>> {
        super::logits(hidden, &self.vocab_table, range)
    }
}
