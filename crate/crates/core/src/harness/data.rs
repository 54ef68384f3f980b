//! Corpus ingestion, batch sampling and evaluation windows.

use rand::Rng;

use super::config::Tokenization;
use super::vocab::{tokenize, Vocab};
use super::HarnessError;
use crate::syntax::{build_hint_targets, DependencyTree, HintTargets};

/// Encoded corpus. Character corpora are one document; word corpora have one
/// document per non-empty line, aligned with treebank sentences when hints
/// are attached.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub docs: Vec<Vec<usize>>,
    pub hints: Option<Vec<HintTargets>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    /// Per-sequence pointer targets, relative to the window start.
    pub hints: Option<Vec<Vec<Option<usize>>>>,
}

/// `docs[doc][start..start + len]` predicts `docs[doc][start + 1..start + 1 + len]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub doc: usize,
    pub start: usize,
    pub len: usize,
}

impl Dataset {
    pub fn load(text: &str, vocab: &Vocab, treebank: Option<&[DependencyTree]>) -> Result<Self, HarnessError> {
        let docs: Vec<Vec<usize>> = match vocab.mode() {
            Tokenization::Char => vec![vocab.encode(text)],
            Tokenization::Word => text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| vocab.encode(l))
                .collect(),
        };
        if docs.iter().all(|d| d.is_empty()) {
            return Err(HarnessError::Data("corpus contains no tokens".into()));
        }
        let hints = match treebank {
            None => None,
            Some(trees) => {
                if vocab.mode() != Tokenization::Word {
                    return Err(HarnessError::Data(
                        "syntax hints need a word-level corpus".into(),
                    ));
                }
                let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
                if lines.len() != trees.len() {
                    return Err(HarnessError::Alignment(format!(
                        "corpus has {} sentences but the treebank has {}",
                        lines.len(),
                        trees.len()
                    )));
                }
                let mut out = Vec::with_capacity(trees.len());
                for (i, (line, tree)) in lines.iter().zip(trees).enumerate() {
                    let words = tokenize(line, Tokenization::Word);
                    if words.as_slice() != tree.tokens() {
                        return Err(HarnessError::Alignment(format!(
                            "sentence {i}: corpus tokens {:?} differ from treebank tokens {:?}",
                            words,
                            tree.tokens()
                        )));
                    }
                    let targets = if tree.len() >= 2 {
                        build_hint_targets(tree)?
                    } else {
                        HintTargets::from_targets(vec![None; tree.len()])
                    };
                    out.push(targets);
                }
                Some(out)
            }
        };
        Ok(Self { docs, hints })
    }

    pub fn predicted_tokens(&self) -> usize {
        self.docs.iter().map(|d| d.len().saturating_sub(1)).sum()
    }

    fn usable(&self) -> Vec<usize> {
        (0..self.docs.len()).filter(|&i| self.docs[i].len() >= 2).collect()
    }

    /// Draws `batch_size` random windows of at most `max_seq_len` inputs.
    pub fn sample_batch<R: Rng>(&self, rng: &mut R, batch_size: usize, max_seq_len: usize) -> Result<Batch, HarnessError> {
        let usable = self.usable();
        if usable.is_empty() {
            return Err(HarnessError::Data("corpus has no sequence with two or more tokens".into()));
        }
        let mut batch = Batch {
            inputs: Vec::with_capacity(batch_size),
            targets: Vec::with_capacity(batch_size),
            hints: self.hints.as_ref().map(|_| Vec::with_capacity(batch_size)),
        };
        for _ in 0..batch_size {
            let doc = usable[rng.gen_range(0..usable.len())];
            let tokens = &self.docs[doc];
            let span = (max_seq_len + 1).min(tokens.len());
            let start = rng.gen_range(0..=tokens.len() - span);
            batch.inputs.push(tokens[start..start + span - 1].to_vec());
            batch.targets.push(tokens[start + 1..start + span].to_vec());
            if let (Some(out), Some(hints)) = (batch.hints.as_mut(), self.hints.as_ref()) {
                out.push(hints[doc].window(start, span - 1));
            }
        }
        Ok(batch)
    }

    /// Non-overlapping windows covering every predicted token exactly once.
    pub fn eval_windows(&self, max_seq_len: usize) -> Vec<Window> {
        let mut out = Vec::new();
        for (doc, tokens) in self.docs.iter().enumerate() {
            let predicted = tokens.len().saturating_sub(1);
            let mut start = 0;
            while start < predicted {
                let len = max_seq_len.min(predicted - start);
                out.push(Window { doc, start, len });
                start += len;
            }
        }
        out
    }

    pub fn window_inputs(&self, w: &Window) -> &[usize] {
        &self.docs[w.doc][w.start..w.start + w.len]
    }

    pub fn window_targets(&self, w: &Window) -> &[usize] {
        &self.docs[w.doc][w.start + 1..w.start + 1 + w.len]
    }
}
