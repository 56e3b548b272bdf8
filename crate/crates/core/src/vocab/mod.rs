//! Token tables and per-task dynamic vocabularies.
//!
//! A task vocabulary lays its ids out contiguously as
//! `base | concepts | background | coordinate bins`, so each decode step's
//! slice is a single id range.

mod composer;
mod tokenizer;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

pub use composer::{background_embedding, ConceptEmbedding, OovComposer, MAX_CONCEPT_PIECES};
pub(crate) use composer::validate_pieces;
pub use tokenizer::{TokenId, Tokenizer};

use crate::error::{Result, UliError};
use crate::scalar::Scalar;
use crate::task::{StepSlice, TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Base,
    Concept,
    Coord,
    Background,
}

impl EntryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Base => "base",
            EntryKind::Concept => "concept",
            EntryKind::Coord => "coord",
            EntryKind::Background => "background",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Concept<T> {
    pub name: String,
    pub pieces: Vec<TokenId>,
    pub embedding: ConceptEmbedding<T>,
}

#[derive(Debug, Clone)]
pub struct Vocabulary<T> {
    pub task: TaskKind,
    tokenizer: Arc<Tokenizer>,
    concepts: Vec<Concept<T>>,
    background: ConceptEmbedding<T>,
    coord_bins: usize,
    dim: usize,
}

impl<T: Scalar> Vocabulary<T> {
    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn tokenizer_arc(&self) -> Arc<Tokenizer> {
        self.tokenizer.clone()
    }

    pub fn base_len(&self) -> usize {
        self.tokenizer.len()
    }

    pub fn concepts(&self) -> &[Concept<T>] {
        &self.concepts
    }

    pub fn background(&self) -> &ConceptEmbedding<T> {
        &self.background
    }

    pub fn coord_bins(&self) -> usize {
        self.coord_bins
    }

    /// Image side the coordinate bins were sized for.
    pub fn resolution(&self) -> usize {
        self.coord_bins / 2
    }

    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.base_len() + self.concepts.len() + 1 + self.coord_bins
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos(&self) -> TokenId {
        self.tokenizer.eos()
    }

    pub fn concept_id(&self, index: usize) -> TokenId {
        assert!(index < self.concepts.len());
        TokenId(self.base_len() + index)
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn background_id(&self) -> TokenId {
        TokenId(self.base_len() + self.concepts.len())
    }

    pub fn coord_id(&self, bin: usize) -> TokenId {
        assert!(bin < self.coord_bins, "coordinate bin {bin} out of range");
        TokenId(self.background_id().0 + 1 + bin)
    }

    pub fn coord_range(&self) -> Range<usize> {
        let start = self.background_id().0 + 1;
        start..start + self.coord_bins
    }

    pub fn class_range(&self) -> Range<usize> {
        self.base_len()..self.background_id().0 + 1
    }

    pub fn text_range(&self) -> Range<usize> {
        0..self.base_len()
    }

    pub fn slice(&self, slice: StepSlice) -> Range<usize> {
        match slice {
            StepSlice::Text => self.text_range(),
            StepSlice::Classes => self.class_range(),
            StepSlice::SignedCoord | StepSlice::UnsignedCoord => self.coord_range(),
        }
    }

    /// Class index of a class-slice token; `None` for background.
    pub fn class_of(&self, id: TokenId) -> Option<usize> {
        let r = self.class_range();
        (r.contains(&id.0) && id != self.background_id()).then(|| id.0 - r.start)
    }

    pub fn bin_of(&self, id: TokenId) -> Option<usize> {
        let r = self.coord_range();
        r.contains(&id.0).then(|| id.0 - r.start)
    }

    pub fn kind(&self, id: TokenId) -> EntryKind {
        if id.0 < self.base_len() {
            EntryKind::Base
        } else if id == self.background_id() {
            EntryKind::Background
        } else if id.0 < self.background_id().0 {
            EntryKind::Concept
        } else {
            assert!(id.0 < self.len(), "token {} outside vocabulary of {}", id.0, self.len());
            EntryKind::Coord
        }
    }

    /// Human-readable surface form.
    pub fn surface(&self, id: TokenId) -> String {
        match self.kind(id) {
            EntryKind::Base => self.tokenizer.piece(id).to_string(),
            EntryKind::Concept => self.concepts[id.0 - self.base_len()].name.clone(),
            EntryKind::Background => "<background>".into(),
            EntryKind::Coord => format!("<bin:{}>", id.0 - self.coord_range().start),
        }
    }

    /// Surface form without spaces, for whitespace-separated dumps.
    pub fn compact_surface(&self, id: TokenId) -> String {
        match self.kind(id) {
            EntryKind::Concept => format!("<{}>", self.surface(id).replace(' ', "_")),
            _ => self.surface(id),
        }
    }

    /// One line per entry: `<id>\t<kind>\t<surface>`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            let id = TokenId(i);
            let _ = writeln!(out, "{}\t{}\t{}", i, self.kind(id).as_str(), self.surface(id));
        }
        out
    }
}

/// Builds the dynamic vocabulary of one task.
///
/// Perception tasks need at least one category; image-level tasks may pass
/// none, in which case the background embedding is the zero vector.
pub fn build_task_vocabulary<T: Scalar>(
    task: &TaskSpec,
    categories: &[&str],
    composer: &OovComposer<T>,
    tokenizer: Arc<Tokenizer>,
) -> Result<Vocabulary<T>> {
    if task.kind.is_grid() && categories.is_empty() {
        return Err(UliError::InvalidConcept(format!("{} needs at least one category", task.kind)));
    }
    if tokenizer.len() != composer.text_embed.rows {
        return Err(UliError::InvalidConcept("composer text table does not match tokenizer".into()));
    }
    let mut seen = HashSet::new();
    let mut concepts = Vec::with_capacity(categories.len());
    for &name in categories {
        let normalized = name.trim().to_lowercase();
        if !seen.insert(normalized.clone()) {
            return Err(UliError::DuplicateCategory(normalized));
        }
        let pieces = tokenizer.tokenize(&normalized)?;
        let embedding = composer.compose(&pieces)?;
        concepts.push(Concept { name: normalized, pieces, embedding });
    }
    let background = if concepts.is_empty() {
        ConceptEmbedding { vector: vec![T::zero(); composer.dim()] }
    } else {
        let positives: Vec<ConceptEmbedding<T>> = concepts.iter().map(|c| c.embedding.clone()).collect();
        background_embedding(&positives)?
    };
    Ok(Vocabulary {
        task: task.kind,
        tokenizer,
        concepts,
        background,
        coord_bins: task.coord_bins(),
        dim: composer.dim(),
    })
}
