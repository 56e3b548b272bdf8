//! Inference: greedy multi-track decoding, caption beam search and the
//! conversion of decoded tracks into boxes, masks, label maps and text.

use std::cmp::Ordering;
use std::ops::Range;

use serde::Serialize;

use crate::autograd::Graph;
use crate::codec::{decode_response, LabelMap, StructuredOutput};
use crate::error::{Result, UliError};
use crate::geometry::{rasterize, BBox, Mask, Point};
use crate::image::Image;
use crate::model::{logits, DecodeSession, ForwardInput, Model, TrackState};
use crate::scalar::Scalar;
use crate::task::{StepSlice, TaskKind, TaskSpec, DENSE_SIDE, SEMSEG_CELL, SEMSEG_DOWNSAMPLE};
use crate::tensor::{log_softmax, softmax};
use crate::vocab::{TokenId, Vocabulary};

/// Per-step vocabulary slices of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeSchedule {
    pub kind: TaskKind,
    pub slices: Vec<StepSlice>,
}

impl DecodeSchedule {
    pub fn of(task: &TaskSpec) -> Self {
        Self { kind: task.kind, slices: task.schedule.clone() }
    }

    pub fn steps(&self) -> usize {
        self.slices.len()
    }

    pub fn range<T: Scalar>(&self, vocab: &Vocabulary<T>, step: usize) -> Range<usize> {
        vocab.slice(self.slices[step])
    }
}

/// Tokens of one track with the in-slice probability of each choice.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTrack {
    pub point: Point,
    pub tokens: Vec<TokenId>,
    pub probs: Vec<f64>,
}

impl DecodedTrack {
    /// Class confidence: probability of the step-0 token.
    pub fn score(&self) -> f64 {
        self.probs.first().copied().unwrap_or(0.0)
    }

    /// Sum of log-probabilities up to and including the first `eos`.
    pub fn log_prob(&self, eos: TokenId) -> f64 {
        let end = self.tokens.iter().position(|&t| t == eos).map_or(self.tokens.len(), |e| e + 1);
        self.probs[..end].iter().map(|p| p.ln()).sum()
    }
}

/// Argmax (lowest index on ties) and its softmax probability.
fn pick<T: Scalar>(scores: &[T]) -> (usize, f64) {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    (best, softmax(scores)[best].to_f64().unwrap_or(0.0))
}

struct Picker<'v, T: Scalar> {
    task: &'v TaskSpec,
    vocab: &'v Vocabulary<T>,
}

impl<T: Scalar> Picker<'_, T> {
    fn choose(&self, step: usize, scores: &[T], so_far: &[TokenId]) -> Result<(TokenId, f64)> {
        let range = self.vocab.slice(self.task.schedule[step]);
        let eos = self.vocab.eos();
        if self.task.kind == TaskKind::Caption && so_far.contains(&eos) {
            return Ok((eos, 1.0));
        }
        let (j, p) = pick(scores);
        let tok = TokenId(range.start + j);
        if !range.contains(&tok.0) {
            return Err(UliError::ScheduleViolation { step, token: tok.0, expected: format!("{range:?}") });
        }
        Ok((tok, p))
    }
}

/// Greedy decoding of every track at once, one model invocation per step.
pub fn parallel_decode<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary<T>,
    task: &TaskSpec,
    image: &Image,
    instruction: &[TokenId],
    points: &[Point],
) -> Result<Vec<DecodedTrack>> {
    let mut session = DecodeSession::new(model, task, vocab, image, instruction)?;
    decode_with_session(&mut session, vocab, task, points)
}

pub(crate) fn decode_with_session<T: Scalar>(
    session: &mut DecodeSession<'_, T>,
    vocab: &Vocabulary<T>,
    task: &TaskSpec,
    points: &[Point],
) -> Result<Vec<DecodedTrack>> {
    let mut out: Vec<DecodedTrack> =
        points.iter().map(|&point| DecodedTrack { point, tokens: Vec::new(), probs: Vec::new() }).collect();
    if points.is_empty() {
        return Ok(out);
    }
    let picker = Picker { task, vocab };
    let (mut tracks, mut hidden) = session.start_tracks(points)?;
    for step in 0..task.steps() {
        let range = vocab.slice(task.schedule[step]);
        for (t, track) in out.iter_mut().enumerate() {
            let scores = session.logits(hidden.row(t), range.clone())?;
            let (tok, p) = picker.choose(step, &scores, &track.tokens)?;
            track.tokens.push(tok);
            track.probs.push(p);
        }
        if step + 1 < task.steps() {
            let fed: Vec<TokenId> = out.iter().map(|t| t.tokens[step]).collect();
            hidden = session.step(&mut tracks, &fed)?;
        }
    }
    Ok(out)
}

/// Reference decoder: one track alone, full forward pass re-run at every
/// step without any cache.
pub fn sequential_decode<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary<T>,
    task: &TaskSpec,
    image: &Image,
    instruction: &[TokenId],
    point: Point,
) -> Result<DecodedTrack> {
    let picker = Picker { task, vocab };
    let filler: Vec<TokenId> = task.schedule.iter().map(|&s| TokenId(vocab.slice(s).start)).collect();
    let mut track = DecodedTrack { point, tokens: Vec::new(), probs: Vec::new() };
    for step in 0..task.steps() {
        let mut response = track.tokens.clone();
        response.extend_from_slice(&filler[step..]);
        let mut g = Graph::new(&model.params);
        let input = ForwardInput { task, image, instruction, points: &[point], responses: &[response] };
        let f = model.forward(&mut g, vocab, input)?;
        let row = g.value(f.hidden).row(f.layout.prediction_position(0, step));
        let scores = logits(row, g.value(f.vocab), vocab.slice(task.schedule[step]))?;
        let (tok, p) = picker.choose(step, &scores, &track.tokens)?;
        track.tokens.push(tok);
        track.probs.push(p);
    }
    Ok(track)
}

/// Anything that scores next-token log-probabilities for a set of prefixes.
pub trait BeamScorer {
    type State: Clone;
    /// State after the prompt and log-probabilities of the first token.
    fn start(&mut self) -> Result<(Self::State, Vec<f64>)>;
    /// Feeds `tokens[i]` after `parents[i]`.
    fn extend(&mut self, parents: &[Self::State], tokens: &[usize]) -> Result<Vec<(Self::State, Vec<f64>)>>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamState {
    pub width: usize,
    /// Best first.
    pub hyps: Vec<Hypothesis>,
}

impl BeamState {
    pub fn best(&self) -> &Hypothesis {
        &self.hyps[0]
    }
}

/// Fixed-length beam search; a hypothesis ends at `eos` or after `steps`
/// tokens and keeps its score from then on.
pub fn beam_search<S: BeamScorer>(scorer: &mut S, width: usize, steps: usize, eos: usize) -> Result<BeamState> {
    if width == 0 || steps == 0 {
        return Err(UliError::Config("beam width and length must be positive".into()));
    }
    let (s0, lp0) = scorer.start()?;
    let mut live = vec![(Hypothesis { tokens: vec![], log_prob: 0.0, finished: false }, s0, lp0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..steps {
        // (score, source, token); finished hypotheses compete unchanged
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, (h, _, lp)) in live.iter().enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                cands.push((h.log_prob + l, i, tok));
            }
        }
        let mut pool: Vec<(f64, Option<(usize, usize)>, usize)> =
            done.iter().enumerate().map(|(j, h)| (h.log_prob, None, j)).collect();
        pool.extend(cands.into_iter().map(|(s, i, t)| (s, Some((i, t)), 0)));
        pool.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| match (a.1, b.1) {
                (None, None) => a.2.cmp(&b.2),
                (None, Some(_)) => Ordering::Less,
                (Some(_), None) => Ordering::Greater,
                (Some(x), Some(y)) => x.cmp(&y),
            })
        });
        pool.truncate(width);
        let mut next_done = Vec::new();
        let mut grow: Vec<(Hypothesis, usize, usize)> = Vec::new();
        for (score, src, j) in pool {
            match src {
                None => next_done.push(done[j].clone()),
                Some((i, tok)) => {
                    let mut tokens = live[i].0.tokens.clone();
                    tokens.push(tok);
                    let finished = tok == eos || step + 1 == steps;
                    let h = Hypothesis { tokens, log_prob: score, finished };
                    if finished {
                        next_done.push(h);
                    } else {
                        grow.push((h, i, tok));
                    }
                }
            }
        }
        done = next_done;
        if grow.is_empty() {
            live.clear();
            break;
        }
        let parents: Vec<S::State> = grow.iter().map(|(_, i, _)| live[*i].1.clone()).collect();
        let toks: Vec<usize> = grow.iter().map(|(_, _, t)| *t).collect();
        let states = scorer.extend(&parents, &toks)?;
        live = grow.into_iter().zip(states).map(|((h, _, _), (s, lp))| (h, s, lp)).collect();
    }
    let mut hyps: Vec<Hypothesis> = done.into_iter().chain(live.into_iter().map(|(h, _, _)| h)).collect();
    hyps.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap_or(Ordering::Equal));
    Ok(BeamState { width, hyps })
}

struct CaptionScorer<'s, 'm, T: Scalar> {
    session: &'s mut DecodeSession<'m, T>,
    range: Range<usize>,
    point: Point,
}

impl<T: Scalar> CaptionScorer<'_, '_, T> {
    fn log_probs(&self, row: &[T]) -> Result<Vec<f64>> {
        let s = self.session.logits(row, self.range.clone())?;
        Ok(log_softmax(&s).into_iter().map(|v| v.to_f64().unwrap_or(f64::NEG_INFINITY)).collect())
    }
}

impl<T: Scalar> BeamScorer for CaptionScorer<'_, '_, T> {
    type State = TrackState;

    fn start(&mut self) -> Result<(TrackState, Vec<f64>)> {
        let (mut tracks, h) = self.session.start_tracks(&[self.point])?;
        Ok((tracks.remove(0), self.log_probs(h.row(0))?))
    }

    fn extend(&mut self, parents: &[TrackState], tokens: &[usize]) -> Result<Vec<(TrackState, Vec<f64>)>> {
        let mut tracks = parents.to_vec();
        let ids: Vec<TokenId> = tokens.iter().map(|&t| TokenId(self.range.start + t)).collect();
        let h = self.session.step(&mut tracks, &ids)?;
        tracks.into_iter().enumerate().map(|(i, t)| Ok((t, self.log_probs(h.row(i))?))).collect()
    }
}

/// Caption beam search; returns `steps` tokens (padded with `eos`) and the
/// cumulative log-probability of the winner.
pub fn beam_decode<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary<T>,
    task: &TaskSpec,
    image: &Image,
    width: usize,
) -> Result<(Vec<TokenId>, f64)> {
    if task.kind != TaskKind::Caption {
        return Err(UliError::Config(format!("beam search is for captioning, not {}", task.kind)));
    }
    let mut session = DecodeSession::new(model, task, vocab, image, &[])?;
    let range = vocab.slice(StepSlice::Text);
    let eos = vocab.eos().0 - range.start;
    let point = Point::new(task.resolution as f64 / 2.0, task.resolution as f64 / 2.0);
    let mut scorer = CaptionScorer { session: &mut session, range: range.clone(), point };
    let beam = beam_search(&mut scorer, width, task.steps(), eos)?;
    let best = beam.best();
    let mut tokens: Vec<TokenId> = best.tokens.iter().map(|&t| TokenId(range.start + t)).collect();
    tokens.resize(task.steps(), vocab.eos());
    Ok((tokens, best.log_prob))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
    pub polygon: Vec<Point>,
    pub mask: Mask,
}

/// Class-wise greedy suppression; input need not be sorted.
pub fn nms(mut boxes: Vec<ScoredBox>, iou: f64) -> Vec<ScoredBox> {
    boxes.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut keep: Vec<ScoredBox> = Vec::new();
    for b in boxes {
        if keep.iter().all(|k| k.category != b.category || k.bbox.iou(&b.bbox) <= iou) {
            keep.push(b);
        }
    }
    keep
}

pub fn postprocess_detection<T: Scalar>(
    task: &TaskSpec,
    vocab: &Vocabulary<T>,
    tracks: &[DecodedTrack],
    nms_iou: Option<f64>,
) -> Result<Vec<ScoredBox>> {
    let mut out = Vec::new();
    for t in tracks {
        if let StructuredOutput::Box { category, bbox } = decode_response(task, vocab, &t.tokens, t.point)? {
            out.push(ScoredBox { bbox, score: t.score(), category });
        }
    }
    Ok(match nms_iou {
        Some(iou) => nms(out, iou),
        None => out,
    })
}

pub fn postprocess_instance<T: Scalar>(
    task: &TaskSpec,
    vocab: &Vocabulary<T>,
    tracks: &[DecodedTrack],
) -> Result<Vec<ScoredInstance>> {
    let mut out = Vec::new();
    for t in tracks {
        if let StructuredOutput::Instance { category, bbox, polygon, .. } = decode_response(task, vocab, &t.tokens, t.point)? {
            let mask = rasterize(&polygon, task.resolution, task.resolution);
            out.push(ScoredInstance { bbox, score: t.score(), category, polygon, mask });
        }
    }
    Ok(out)
}

/// Assembles each track's 4×4 block into the downsampled map, then
/// upsamples to the input size (nearest neighbour). Uncovered cells stay 0.
pub fn postprocess_semseg<T: Scalar>(task: &TaskSpec, vocab: &Vocabulary<T>, tracks: &[DecodedTrack]) -> Result<LabelMap> {
    let side = task.resolution / SEMSEG_DOWNSAMPLE;
    let mut small = LabelMap::new(side, side);
    for t in tracks {
        let StructuredOutput::Dense { labels } = decode_response(task, vocab, &t.tokens, t.point)? else {
            return Err(UliError::LayoutMismatch("semantic track did not decode to labels".into()));
        };
        let cx = (t.point.x / SEMSEG_CELL as f64) as usize;
        let cy = (t.point.y / SEMSEG_CELL as f64) as usize;
        for dy in 0..DENSE_SIDE {
            for dx in 0..DENSE_SIDE {
                let (x, y) = (cx * DENSE_SIDE + dx, cy * DENSE_SIDE + dy);
                if x < side && y < side {
                    small.set(x, y, labels[dy * DENSE_SIDE + dx]);
                }
            }
        }
    }
    Ok(small.resize_nearest(task.resolution, task.resolution))
}

pub fn postprocess_caption<T: Scalar>(vocab: &Vocabulary<T>, track: &DecodedTrack) -> String {
    vocab.tokenizer().detokenize(&track.tokens)
}

pub fn postprocess_grounding<T: Scalar>(task: &TaskSpec, vocab: &Vocabulary<T>, track: &DecodedTrack) -> Result<BBox> {
    match decode_response(task, vocab, &track.tokens, track.point)? {
        StructuredOutput::Grounding { bbox } => Ok(bbox),
        _ => Err(UliError::LayoutMismatch("grounding track did not decode to a box".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::task::Profile;
    use crate::template::make_grid;
    use crate::vocab::{build_task_vocabulary, Tokenizer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn setup(kind: TaskKind, seed: u64) -> (Model<f64>, TaskSpec, Vocabulary<f64>, Image) {
        let cfg = ModelConfig { dim: 16, heads: 2, pretrained_layers: 2, new_layers: 2, init_std: 0.3, ..ModelConfig::desk() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Model<f64> = Model::new(cfg, &mut rng).unwrap();
        let task = TaskSpec::new(kind, &Profile::desk());
        let cats: &[&str] = if kind.is_grid() { &["square", "circle"] } else { &[] };
        let v = build_task_vocabulary(&task, cats, &m.composer(), Arc::new(Tokenizer::builtin())).unwrap();
        let mut im = Image::filled(task.resolution, task.resolution, [0.0; 3]);
        for p in im.data.iter_mut() {
            *p = rng.random();
        }
        (m, task, v, im)
    }

    #[test]
    fn parallel_equals_sequential() {
        for (i, kind) in TaskKind::ALL.into_iter().enumerate() {
            let (m, task, v, im) = setup(kind, i as u64);
            let grid = make_grid(&task).unwrap();
            let instr = if kind.has_instruction() { v.tokenizer().tokenize("circle").unwrap() } else { vec![] };
            let pts: Vec<Point> = grid.points.iter().copied().step_by(3).collect();
            let par = parallel_decode(&m, &v, &task, &im, &instr, &pts).unwrap();
            for (t, &p) in pts.iter().enumerate() {
                let seq = sequential_decode(&m, &v, &task, &im, &instr, p).unwrap();
                assert_eq!(par[t].tokens, seq.tokens, "{kind} track {t}");
            }
        }
    }

    #[test]
    fn step_counts_and_slices() {
        for (i, kind) in TaskKind::ALL.into_iter().enumerate() {
            let (m, task, v, im) = setup(kind, 10 + i as u64);
            let grid = make_grid(&task).unwrap();
            let out = parallel_decode(&m, &v, &task, &im, &[], &grid.points).unwrap();
            let expected = [5, 31, 16, 20, 4][i];
            for t in &out {
                assert_eq!(t.tokens.len(), expected);
                for (s, tok) in t.tokens.iter().enumerate() {
                    assert!(v.slice(task.schedule[s]).contains(&tok.0));
                }
            }
        }
    }

    #[test]
    fn no_tracks_no_output() {
        let (m, task, v, im) = setup(TaskKind::Detection, 1);
        assert!(parallel_decode(&m, &v, &task, &im, &[], &[]).unwrap().is_empty());
    }

    #[test]
    fn caption_stops_at_terminator() {
        let (m, task, v, im) = setup(TaskKind::Caption, 2);
        let out = parallel_decode(&m, &v, &task, &im, &[], &[Point::new(16.0, 16.0)]).unwrap();
        let t = &out[0].tokens;
        if let Some(e) = t.iter().position(|&x| x == v.eos()) {
            assert!(t[e..].iter().all(|&x| x == v.eos()));
        }
    }

    /// Next-token table keyed by prefix; unknown prefixes end immediately.
    struct ToyLm {
        table: Vec<(Vec<usize>, Vec<f64>)>,
        vocab: usize,
        eos: usize,
    }

    impl ToyLm {
        fn probs(&self, prefix: &[usize]) -> Vec<f64> {
            match self.table.iter().find(|(p, _)| p == prefix) {
                Some((_, probs)) => probs.iter().map(|p| p.ln()).collect(),
                None => (0..self.vocab).map(|t| if t == self.eos { 0.0 } else { f64::NEG_INFINITY }).collect(),
            }
        }
    }

    impl BeamScorer for ToyLm {
        type State = Vec<usize>;
        fn start(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
            Ok((vec![], self.probs(&[])))
        }
        fn extend(&mut self, parents: &[Vec<usize>], tokens: &[usize]) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
            Ok(parents
                .iter()
                .zip(tokens)
                .map(|(p, &t)| {
                    let mut q = p.clone();
                    q.push(t);
                    let lp = self.probs(&q);
                    (q, lp)
                })
                .collect())
        }
    }

    #[test]
    fn beam_finds_better_sequence_than_greedy() {
        // tokens: 0 = eos, 1 = a, 2 = b
        // greedy takes a (.6) then ends at .6·.5; b·b has .4·1.0
        let lm = || ToyLm {
            table: vec![
                (vec![], vec![0.0, 0.6, 0.4]),
                (vec![1], vec![0.0, 0.5, 0.5]),
                (vec![2], vec![0.0, 0.0, 1.0]),
            ],
            vocab: 3,
            eos: 0,
        };
        let g = beam_search(&mut lm(), 1, 3, 0).unwrap();
        let b = beam_search(&mut lm(), 2, 3, 0).unwrap();
        assert_eq!(g.best().tokens, vec![1, 1, 0]);
        assert_eq!(b.best().tokens, vec![2, 2, 0]);
        assert!((b.best().log_prob - 0.4f64.ln()).abs() < 1e-12);
        // exhaustive check over all 2-token prefixes
        let mut best = f64::NEG_INFINITY;
        for x in 0..3 {
            for y in 0..3 {
                let lm = lm();
                let l = lm.probs(&[])[x] + lm.probs(&[x])[y] + if y == 0 { 0.0 } else { lm.probs(&[x, y])[0] };
                best = best.max(l);
            }
        }
        assert!((best - b.best().log_prob).abs() < 1e-12);
    }

    #[test]
    fn wider_beam_can_lose_to_greedy() {
        // greedy ends after a (.4·.34); width 2 prunes that prefix at step 2
        // in favour of b·a and b·b, whose continuations then spread thin
        let third = 1.0 / 3.0;
        let lm = || ToyLm {
            table: vec![
                (vec![], vec![0.0, 0.4, 0.35, 0.25]),
                (vec![1], vec![0.34, 0.22, 0.22, 0.22]),
                (vec![2], vec![0.0, 0.2 / 0.35, 0.15 / 0.35, 0.0]),
                (vec![2, 1], vec![0.0, third, third, third]),
                (vec![2, 2], vec![0.0, third, third, third]),
            ],
            vocab: 4,
            eos: 0,
        };
        let g = beam_search(&mut lm(), 1, 4, 0).unwrap();
        let b = beam_search(&mut lm(), 2, 4, 0).unwrap();
        assert!(g.best().log_prob > b.best().log_prob);
    }

    #[test]
    fn width_one_beam_is_greedy() {
        for seed in 0..3 {
            let (m, task, v, im) = setup(TaskKind::Caption, 30 + seed);
            let g = parallel_decode(&m, &v, &task, &im, &[], &[Point::new(16.0, 16.0)]).unwrap();
            let (toks, lp) = beam_decode(&m, &v, &task, &im, 1).unwrap();
            assert_eq!(toks, g[0].tokens);
            assert!((lp - g[0].log_prob(v.eos())).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_rejects_other_tasks() {
        let (m, task, v, im) = setup(TaskKind::Detection, 3);
        assert!(beam_decode(&m, &v, &task, &im, 2).is_err());
    }

    fn track(v: &Vocabulary<f64>, point: Point, tokens: Vec<TokenId>) -> DecodedTrack {
        let probs = vec![0.5; tokens.len()];
        let _ = v;
        DecodedTrack { point, tokens, probs }
    }

    #[test]
    fn background_tracks_dropped() {
        let (_, task, v, _) = setup(TaskKind::Detection, 4);
        let pad = crate::codec::coord_padding(&v);
        let bg = track(&v, Point::new(8.0, 8.0), vec![v.background_id(), pad, pad, pad, pad]);
        assert!(postprocess_detection(&task, &v, &[bg.clone(), bg], None).unwrap().is_empty());
    }

    #[test]
    fn detection_box_is_offset_from_point() {
        let (_, task, v, _) = setup(TaskKind::Detection, 5);
        let bb = BBox::new(10.0, 12.0, 30.0, 40.0);
        let p = Point::new(20.0, 24.0);
        let t = crate::codec::encode_detection(&crate::codec::BoxAnn { category: 1, bbox: bb }, p, &v).unwrap();
        let out = postprocess_detection(&task, &v, &[track(&v, p, t.tokens)], None).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].category, 1);
        assert!(out[0].bbox.max_corner_error(&bb) <= 0.5);
    }

    #[test]
    fn nms_suppresses_same_class_only() {
        let b = |x: f64, s: f64, c: usize| ScoredBox { bbox: BBox::new(x, 0.0, x + 10.0, 10.0), score: s, category: c };
        let kept = nms(vec![b(0.0, 0.5, 0), b(1.0, 0.9, 0), b(1.0, 0.8, 1), b(30.0, 0.1, 0)], 0.5);
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn semseg_output_matches_input_shape() {
        let (_, task, v, _) = setup(TaskKind::SemanticSeg, 6);
        let grid = make_grid(&task).unwrap();
        let tracks: Vec<DecodedTrack> = grid
            .points
            .iter()
            .enumerate()
            .map(|(i, &p)| track(&v, p, vec![if i % 2 == 0 { v.concept_id(0) } else { v.background_id() }; 16]))
            .collect();
        let map = postprocess_semseg(&task, &v, &tracks).unwrap();
        assert_eq!((map.width, map.height), (64, 64));
        assert_eq!(map.get(0, 0), 1);
        assert_eq!(map.get(16, 0), 0);
        assert_eq!(map.get(15, 15), 1);
    }
}
