//! Compression of multi-piece concepts into a single embedding.
//!
//! The pieces' text embeddings plus absolute position embeddings go through
//! one single-head attention layer (no residual); the first output position
//! is the concept embedding. Single-piece concepts use the raw text
//! embedding.

use rand::Rng;

use crate::error::{Result, UliError};
use crate::params::normal_matrix;
use crate::scalar::{dot, Scalar};
use crate::tensor::{softmax, Matrix};
use crate::vocab::TokenId;

/// Longest concept accepted by the composer.
pub const MAX_CONCEPT_PIECES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbedding<T> {
    pub vector: Vec<T>,
}

impl<T: Scalar> ConceptEmbedding<T> {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }

    pub fn cosine(&self, other: &Self) -> T {
        let n = dot(&self.vector, &self.vector).sqrt() * dot(&other.vector, &other.vector).sqrt();
        dot(&self.vector, &other.vector) / n
    }
}

/// Weights of the single attention layer plus the tables it reads.
#[derive(Debug, Clone)]
pub struct OovComposer<T> {
    /// Text embedding table, one row per subword piece.
    pub text_embed: Matrix<T>,
    /// Absolute position table, one row per piece slot.
    pub pos_embed: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
}

impl<T: Scalar> OovComposer<T> {
    /// Identity value/output projections, `N(0, 0.02²)` queries, keys and
    /// position table.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, text_embed: Matrix<T>) -> Self {
        let dim = text_embed.cols;
        Self {
            pos_embed: normal_matrix(rng, MAX_CONCEPT_PIECES, dim, 0.02),
            wq: normal_matrix(rng, dim, dim, 0.02),
            wk: normal_matrix(rng, dim, dim, 0.02),
            wv: Matrix::identity(dim),
            wo: Matrix::identity(dim),
            text_embed,
        }
    }

    pub fn dim(&self) -> usize {
        self.text_embed.cols
    }

    pub fn compose(&self, pieces: &[TokenId]) -> Result<ConceptEmbedding<T>> {
        validate_pieces(pieces, self.text_embed.rows)?;
        if pieces.len() == 1 {
            return Ok(ConceptEmbedding { vector: self.text_embed.row(pieces[0].0).to_vec() });
        }
        let dim = self.dim();
        let mut x = Matrix::zeros(pieces.len(), dim);
        for (i, p) in pieces.iter().enumerate() {
            for (c, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = self.text_embed.get(p.0, c) + self.pos_embed.get(i, c);
            }
        }
        let first = Matrix::row_vector(x.row(0).to_vec());
        let q = first.matmul(&self.wq);
        let k = x.matmul(&self.wk);
        let v = x.matmul(&self.wv);
        let scale = T::one() / T::of(dim as f64).sqrt();
        let scores: Vec<T> = (0..k.rows).map(|j| dot(q.row(0), k.row(j)) * scale).collect();
        let probs = softmax(&scores);
        let mut mixed = Matrix::zeros(1, dim);
        for (j, p) in probs.iter().enumerate() {
            for (o, &vv) in mixed.data.iter_mut().zip(v.row(j)) {
                *o += *p * vv;
            }
        }
        Ok(ConceptEmbedding { vector: mixed.matmul(&self.wo).data })
    }
}

pub(crate) fn validate_pieces(pieces: &[TokenId], table: usize) -> Result<()> {
    if pieces.is_empty() {
        return Err(UliError::InvalidConcept("empty piece list".into()));
    }
    if pieces.len() > MAX_CONCEPT_PIECES {
        return Err(UliError::InvalidConcept(format!(
            "{} pieces exceed the limit of {MAX_CONCEPT_PIECES}",
            pieces.len()
        )));
    }
    if let Some(p) = pieces.iter().find(|p| p.0 >= table) {
        return Err(UliError::InvalidConcept(format!("piece id {} outside table of {table}", p.0)));
    }
    Ok(())
}

/// Negated mean of the positive class embeddings.
pub fn background_embedding<T: Scalar>(positives: &[ConceptEmbedding<T>]) -> Result<ConceptEmbedding<T>> {
    let first = positives.first().ok_or_else(|| UliError::InvalidConcept("no positive classes".into()))?;
    let dim = first.dim();
    if positives.iter().any(|p| p.dim() != dim) {
        return Err(UliError::InvalidConcept("positive embeddings differ in dimension".into()));
    }
    let n = T::of(positives.len() as f64);
    let mut sum = vec![T::zero(); dim];
    for p in positives {
        for (s, v) in sum.iter_mut().zip(&p.vector) {
            *s += *v;
        }
    }
    Ok(ConceptEmbedding { vector: sum.into_iter().map(|s| -s / n).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Tokenizer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn composer(seed: u64, dim: usize) -> (Tokenizer, OovComposer<f64>) {
        let tok = Tokenizer::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let te = normal_matrix(&mut rng, tok.len(), dim, 1.0);
        (tok, OovComposer::init(&mut rng, te))
    }

    #[test]
    fn single_piece_is_raw_text_embedding() {
        let (tok, comp) = composer(1, 8);
        let cat = tok.tokenize("cat").unwrap();
        let e = comp.compose(&cat).unwrap();
        assert_eq!(e.vector.as_slice(), comp.text_embed.row(cat[0].0));
    }

    #[test]
    fn identical_pieces_with_identity_value_give_input() {
        let (tok, mut comp) = composer(2, 8);
        comp.wq = Matrix::zeros(8, 8);
        comp.pos_embed = Matrix::zeros(MAX_CONCEPT_PIECES, 8);
        let red = tok.tokenize("red").unwrap()[0];
        let e = comp.compose(&[red, red]).unwrap();
        for (a, b) in e.vector.iter().zip(comp.text_embed.row(red.0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Full attention matrix computed entry by entry, first row kept.
    fn reference_compose(comp: &OovComposer<f64>, pieces: &[TokenId]) -> Vec<f64> {
        let d = comp.dim();
        let n = pieces.len();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|c| comp.text_embed.get(pieces[i].0, c) + comp.pos_embed.get(i, c)).collect())
            .collect();
        let proj = |w: &Matrix<f64>, row: &Vec<f64>| -> Vec<f64> {
            (0..d).map(|c| (0..d).map(|r| row[r] * w.get(r, c)).sum()).collect()
        };
        let qs: Vec<Vec<f64>> = x.iter().map(|r| proj(&comp.wq, r)).collect();
        let ks: Vec<Vec<f64>> = x.iter().map(|r| proj(&comp.wk, r)).collect();
        let vs: Vec<Vec<f64>> = x.iter().map(|r| proj(&comp.wv, r)).collect();
        let mut outs = Vec::new();
        for qi in &qs {
            let s: Vec<f64> =
                ks.iter().map(|k| qi.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mixed: Vec<f64> = (0..d).map(|c| (0..n).map(|j| e[j] / z * vs[j][c]).sum()).collect();
            outs.push(proj(&comp.wo, &mixed));
        }
        outs.swap_remove(0)
    }

    #[test]
    fn two_piece_concept_matches_reference_attention() {
        let (tok, mut comp) = composer(9, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        comp.wq = normal_matrix(&mut rng, 16, 16, 0.5);
        comp.wk = normal_matrix(&mut rng, 16, 16, 0.5);
        comp.wv = normal_matrix(&mut rng, 16, 16, 0.5);
        comp.wo = normal_matrix(&mut rng, 16, 16, 0.5);
        let pieces = tok.tokenize("traffic light").unwrap();
        let got = comp.compose(&pieces).unwrap();
        let want = reference_compose(&comp, &pieces);
        for (a, b) in got.vector.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn compose_is_deterministic() {
        let (tok, comp) = composer(4, 12);
        let pieces = tok.tokenize("teddy bear").unwrap();
        let a = comp.compose(&pieces).unwrap();
        let b = comp.compose(&pieces).unwrap();
        assert!(a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn compose_rejects_bad_lengths() {
        let (_, comp) = composer(5, 4);
        assert!(matches!(comp.compose(&[]), Err(UliError::InvalidConcept(_))));
        assert!(matches!(comp.compose(&[TokenId(1); 9]), Err(UliError::InvalidConcept(_))));
    }

    #[test]
    fn background_examples() {
        let one = [ConceptEmbedding { vector: vec![1.0f64, 0.0] }];
        assert_eq!(background_embedding(&one).unwrap().vector, vec![-1.0, 0.0]);
        let two = [ConceptEmbedding { vector: vec![1.0f64, 0.0] }, ConceptEmbedding { vector: vec![0.0, 1.0] }];
        assert_eq!(background_embedding(&two).unwrap().vector, vec![-0.5, -0.5]);
        assert!(background_embedding::<f64>(&[]).is_err());
    }

    #[test]
    fn background_of_five_random_vectors_is_negated_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pos: Vec<ConceptEmbedding<f64>> =
            (0..5).map(|_| ConceptEmbedding { vector: normal_matrix(&mut rng, 1, 6, 1.0).data }).collect();
        let bg = background_embedding(&pos).unwrap();
        for c in 0..6 {
            let mut naive = 0.0;
            for p in &pos {
                naive += p.vector[c];
            }
            assert!((bg.vector[c] + naive / 5.0).abs() < 1e-12);
        }
        let single = background_embedding(&pos[..1]).unwrap();
        assert!((single.cosine(&pos[0]) + 1.0).abs() < 1e-12);
    }
}
