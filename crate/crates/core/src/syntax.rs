//! Syntax-hint supervision from dependency trees.
//!
//! For the token at position `t`, the hint is the nearest ancestor of the next
//! token `t + 1` that sits to its left in the sentence, or `t` itself when no
//! such ancestor exists. Hints become one-hot rows that the pointer loss
//! compares against attention weights.

use std::fmt;

use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Guard added inside the pointer-loss logarithm.
pub const POINTER_LOG_EPS: f64 = 1e-12;

/// Default pointer-loss weight.
pub const DEFAULT_LAMBDA_P: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TreebankError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sentence {sentence} (line {line}): {message}")]
    Invalid {
        sentence: usize,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Error)]
pub enum SyntaxError {
    #[error("position {t} has no following token in a sentence of length {len}")]
    NoSuccessor { t: usize, len: usize },
    #[error("hint targets need at least two tokens, got {0}")]
    TooShort(usize),
    #[error("pointer-loss weight must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One parsed sentence. `heads[i]` is the 0-based parent of token `i`, `None`
/// for a root attachment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyTree {
    tokens: Vec<String>,
    heads: Vec<Option<usize>>,
}

impl DependencyTree {
    /// Builds a tree from 1-based heads (0 = root), validating ranges and
    /// acyclicity.
    pub fn from_one_based(tokens: Vec<String>, heads: &[usize]) -> Result<Self, String> {
        if tokens.len() != heads.len() {
            return Err(format!("{} tokens but {} heads", tokens.len(), heads.len()));
        }
        let n = heads.len();
        let mut zero_based = Vec::with_capacity(n);
        for (i, &h) in heads.iter().enumerate() {
            if h > n {
                return Err(format!("token {} has head {h} beyond sentence length {n}", i + 1));
            }
            if h == i + 1 {
                return Err(format!("token {} is its own head", i + 1));
            }
            zero_based.push(h.checked_sub(1));
        }
        let tree = Self {
            tokens,
            heads: zero_based,
        };
        if let Some(node) = tree.find_cycle() {
            return Err(format!("head chain from token {} never reaches the root", node + 1));
        }
        Ok(tree)
    }

    fn find_cycle(&self) -> Option<usize> {
        let n = self.len();
        (0..n).find(|&start| {
            let mut node = start;
            for _ in 0..=n {
                match self.heads[node] {
                    Some(p) => node = p,
                    None => return false,
                }
            }
            true
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn heads(&self) -> &[Option<usize>] {
        &self.heads
    }

    pub fn head(&self, i: usize) -> Option<usize> {
        self.heads[i]
    }

    /// Ancestors of `i`, nearest first.
    pub fn ancestors(&self, i: usize) -> Ancestors<'_> {
        Ancestors {
            tree: self,
            next: self.heads[i],
        }
    }
}

impl fmt::Display for DependencyTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (tok, head)) in self.tokens.iter().zip(&self.heads).enumerate() {
            writeln!(f, "{}\t{}\t{}", i + 1, tok, head.map_or(0, |h| h + 1))?;
        }
        Ok(())
    }
}

pub struct Ancestors<'a> {
    tree: &'a DependencyTree,
    next: Option<usize>,
}

impl Iterator for Ancestors<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let cur = self.next?;
        self.next = self.tree.heads[cur];
        Some(cur)
    }
}

/// Reads the three-column `ID<TAB>FORM<TAB>HEAD` treebank format. Sentences
/// are separated by blank lines; lines starting with `#` are skipped.
pub fn parse_treebank(text: &str) -> Result<Vec<DependencyTree>, TreebankError> {
    struct Pending {
        first_line: usize,
        tokens: Vec<String>,
        heads: Vec<usize>,
    }

    let mut trees = Vec::new();
    let mut pending: Option<Pending> = None;
    let finish = |p: Pending, trees: &mut Vec<DependencyTree>| -> Result<(), TreebankError> {
        let sentence = trees.len();
        let tree = DependencyTree::from_one_based(p.tokens, &p.heads).map_err(|message| {
            TreebankError::Invalid {
                sentence,
                line: p.first_line,
                message,
            }
        })?;
        trees.push(tree);
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.starts_with('#') {
            continue;
        }
        if line.trim().is_empty() {
            if let Some(p) = pending.take() {
                finish(p, &mut trees)?;
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(TreebankError::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let parse_num = |field: &str, what: &str| {
            field.trim().parse::<usize>().map_err(|_| TreebankError::Parse {
                line: line_no,
                message: format!("{what} {field:?} is not a non-negative integer"),
            })
        };
        let id = parse_num(cols[0], "ID")?;
        let head = parse_num(cols[2], "HEAD")?;
        let form = cols[1];
        if form.is_empty() {
            return Err(TreebankError::Parse {
                line: line_no,
                message: "empty FORM".into(),
            });
        }
        let p = pending.get_or_insert_with(|| Pending {
            first_line: line_no,
            tokens: Vec::new(),
            heads: Vec::new(),
        });
        if id != p.tokens.len() + 1 {
            return Err(TreebankError::Parse {
                line: line_no,
                message: format!("expected ID {}, found {id}", p.tokens.len() + 1),
            });
        }
        p.tokens.push(form.to_string());
        p.heads.push(head);
    }
    if let Some(p) = pending.take() {
        finish(p, &mut trees)?;
    }
    Ok(trees)
}

/// Hint position for the token at `t`: the nearest ancestor of `t + 1` lying
/// left of `t + 1`, falling back to `t`.
pub fn extract_hint(tree: &DependencyTree, t: usize) -> Result<usize, SyntaxError> {
    let next = t + 1;
    if next >= tree.len() {
        return Err(SyntaxError::NoSuccessor { t, len: tree.len() });
    }
    Ok(tree.ancestors(next).find(|&a| a < next).unwrap_or(t))
}

/// One-hot pointer targets for a sentence. Row `t` points at the hint of `t`;
/// the last row has no successor and carries no target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HintTargets {
    targets: Vec<Option<usize>>,
}

impl HintTargets {
    pub fn from_targets(targets: Vec<Option<usize>>) -> Self {
        Self { targets }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target_index(&self, t: usize) -> Option<usize> {
        self.targets[t]
    }

    pub fn targets(&self) -> &[Option<usize>] {
        &self.targets
    }

    pub fn row_valid(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }

    pub fn valid_rows(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    /// The `n×n` one-hot matrix `y_s`.
    pub fn one_hot(&self) -> Tensor {
        let n = self.targets.len();
        let mut y = Tensor::zeros(&[n, n]);
        for (t, target) in self.targets.iter().enumerate() {
            if let Some(j) = *target {
                y.set(t, j, 1.0);
            }
        }
        y
    }

    /// Targets for the input window `start..start + len`, re-indexed relative
    /// to `start`. Rows whose hint lies before the window lose their target.
    pub fn window(&self, start: usize, len: usize) -> Vec<Option<usize>> {
        (start..start + len)
            .map(|t| {
                self.targets
                    .get(t)
                    .copied()
                    .flatten()
                    .and_then(|h| h.checked_sub(start))
            })
            .collect()
    }
}

pub fn build_hint_targets(tree: &DependencyTree) -> Result<HintTargets, SyntaxError> {
    let n = tree.len();
    if n < 2 {
        return Err(SyntaxError::TooShort(n));
    }
    let mut targets = Vec::with_capacity(n);
    for t in 0..n - 1 {
        targets.push(Some(extract_hint(tree, t)?));
    }
    targets.push(None);
    Ok(HintTargets { targets })
}

#[derive(Clone, Copy, Debug)]
pub struct PointerLoss {
    pub loss: Var,
    pub valid_rows: usize,
    /// Set when there was nothing to supervise; `loss` is then a constant 0.
    pub no_valid_rows: bool,
}

/// Mean over supervised rows of `-log(A[t][target_t] + ε)`.
pub fn pointer_loss(tape: &mut Tape, attention: Var, targets: &[Option<usize>]) -> Result<PointerLoss, SyntaxError> {
    let valid_rows = targets.iter().filter(|t| t.is_some()).count();
    if valid_rows == 0 {
        log::warn!("pointer loss has no supervised rows; contributing 0");
        return Ok(PointerLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            valid_rows,
            no_valid_rows: true,
        });
    }
    let loss = tape.pointer_nll(attention, targets, POINTER_LOG_EPS, valid_rows as f64)?;
    Ok(PointerLoss {
        loss,
        valid_rows,
        no_valid_rows: false,
    })
}

/// Pointer loss over several attention matrices at once, averaged over every
/// supervised row of every matrix.
pub fn pointer_loss_batch(
    tape: &mut Tape,
    attention: &[Var],
    targets: &[Vec<Option<usize>>],
) -> Result<PointerLoss, SyntaxError> {
    if attention.len() != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "pointer_loss_batch",
            left: vec![attention.len()],
            right: vec![targets.len()],
        }
        .into());
    }
    let valid_rows: usize = targets.iter().map(|t| t.iter().filter(|x| x.is_some()).count()).sum();
    if valid_rows == 0 {
        log::warn!("pointer loss has no supervised rows; contributing 0");
        return Ok(PointerLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            valid_rows,
            no_valid_rows: true,
        });
    }
    let mut total: Option<Var> = None;
    for (&a, t) in attention.iter().zip(targets) {
        if t.iter().all(Option::is_none) {
            continue;
        }
        let part = tape.pointer_nll(a, t, POINTER_LOG_EPS, valid_rows as f64)?;
        total = Some(match total {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    Ok(PointerLoss {
        loss: total.expect("at least one supervised matrix"),
        valid_rows,
        no_valid_rows: false,
    })
}

/// `lm_loss + λ_p · Σ pointer_losses`.
pub fn total_loss(tape: &mut Tape, lm_loss: Var, pointer_losses: &[Var], lambda_p: f64) -> Result<Var, SyntaxError> {
    if lambda_p < 0.0 || lambda_p.is_nan() {
        return Err(SyntaxError::NegativeLambda(lambda_p));
    }
    if pointer_losses.is_empty() || lambda_p == 0.0 {
        return Ok(lm_loss);
    }
    let mut sum = pointer_losses[0];
    for &p in &pointer_losses[1..] {
        sum = tape.add(sum, p)?;
    }
    let weighted = tape.scale(sum, lambda_p);
    Ok(tape.add(lm_loss, weighted)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::tensor::BoolMask;

    const CAT: &str = "1\tthe\t2\n2\tcat\t3\n3\tchased\t0\n4\ta\t5\n5\tmouse\t3\n";

    fn tree(heads: &[usize]) -> DependencyTree {
        let tokens = (0..heads.len()).map(|i| format!("w{i}")).collect();
        DependencyTree::from_one_based(tokens, heads).unwrap()
    }

    #[test]
    fn empty_input_parses_to_nothing() {
        assert!(parse_treebank("").unwrap().is_empty());
        assert!(parse_treebank("# comment only\n\n").unwrap().is_empty());
    }

    #[test]
    fn single_root_token() {
        let trees = parse_treebank("1\thello\t0\n").unwrap();
        assert_eq!(trees.len(), 1);
        assert_eq!(trees[0].heads(), &[None]);
    }

    #[test]
    fn five_token_sentence() {
        let trees = parse_treebank(&format!("# sent 1\n{CAT}\n")).unwrap();
        let t = &trees[0];
        assert_eq!(t.tokens()[2], "chased");
        assert_eq!(t.head(2), None);
        assert_eq!(t.heads(), &[Some(1), Some(2), None, Some(4), Some(2)]);
        assert_eq!(parse_treebank(&t.to_string()).unwrap()[0], *t);
    }

    #[test]
    fn sentences_split_on_blank_lines() {
        let text = format!("{CAT}\n1\tyes\t0\n\n\n1\tno\t0\n2\tway\t1\n");
        let trees = parse_treebank(&text).unwrap();
        assert_eq!(trees.iter().map(|t| t.len()).collect::<Vec<_>>(), [5, 1, 2]);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = parse_treebank("1\ta\t0\n2\tb\n").unwrap_err();
        assert!(matches!(err, TreebankError::Parse { line: 2, .. }), "{err}");
        let err = parse_treebank("1\ta\tx\n").unwrap_err();
        assert!(matches!(err, TreebankError::Parse { line: 1, .. }));
        let err = parse_treebank("# c\n1\ta\t0\n3\tb\t1\n").unwrap_err();
        assert!(matches!(err, TreebankError::Parse { line: 3, .. }));
    }

    #[test]
    fn cycles_and_bad_heads_are_rejected() {
        let err = parse_treebank("1\ta\t0\n\n1\ta\t2\n2\tb\t1\n").unwrap_err();
        match err {
            TreebankError::Invalid { sentence, line, .. } => assert_eq!((sentence, line), (1, 3)),
            other => panic!("unexpected {other}"),
        }
        assert!(parse_treebank("1\ta\t3\n2\tb\t0\n").is_err());
        assert!(parse_treebank("1\ta\t1\n").is_err());
    }

    #[test]
    fn hint_examples() {
        let t = &parse_treebank(CAT).unwrap()[0];
        assert_eq!(extract_hint(t, 3).unwrap(), 2);
        assert_eq!(extract_hint(t, 0).unwrap(), 0);
        assert_eq!(extract_hint(t, 1).unwrap(), 1);
        assert!(matches!(extract_hint(t, 4), Err(SyntaxError::NoSuccessor { .. })));

        let chain = tree(&[0, 1, 2, 3, 4, 5]);
        for i in 0..5 {
            assert_eq!(extract_hint(&chain, i).unwrap(), i);
        }
    }

    #[test]
    fn hint_targets_examples() {
        let t = tree(&[0, 1]);
        let h = build_hint_targets(&t).unwrap();
        assert_eq!(h.targets(), &[Some(0), None]);
        assert_eq!(h.row_valid(), vec![true, false]);

        let t = &parse_treebank(CAT).unwrap()[0];
        let h = build_hint_targets(t).unwrap();
        let y = h.one_hot();
        for row in 0..4 {
            assert_eq!(y.row(row).iter().sum::<f64>(), 1.0);
            assert!(h.target_index(row).unwrap() <= row);
        }
        assert!(y.row(4).iter().all(|&v| v == 0.0));
        assert!(matches!(build_hint_targets(&tree(&[0])), Err(SyntaxError::TooShort(1))));
    }

    #[test]
    fn window_reindexes_and_drops_out_of_window_hints() {
        let h = HintTargets::from_targets(vec![Some(0), Some(0), Some(2), Some(1), None]);
        assert_eq!(h.window(1, 3), vec![None, Some(1), Some(0)]);
        assert_eq!(h.window(2, 3), vec![Some(0), None, None]);
    }

    #[test]
    fn pointer_loss_values() {
        let mut tape = Tape::new();
        let targets = [Some(0), Some(1), None];
        let exact = tape.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.2, 0.3, 0.5]]).unwrap());
        let p = pointer_loss(&mut tape, exact, &targets).unwrap();
        assert!(tape.value(p.loss).item().abs() < 1e-9);
        assert_eq!(p.valid_rows, 2);

        let uniform = tape.constant(Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
        let p = pointer_loss(&mut tape, uniform, &[Some(1)]).unwrap();
        assert!((tape.value(p.loss).item() - 0.69315).abs() < 1e-5);

        let zero = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let p = pointer_loss(&mut tape, zero, &[Some(1)]).unwrap();
        let v = tape.value(p.loss).item();
        assert!(v.is_finite() && (v - 27.631).abs() < 1e-3);

        let p = pointer_loss(&mut tape, zero, &[None]).unwrap();
        assert!(p.no_valid_rows);
        assert_eq!(tape.value(p.loss).item(), 0.0);
    }

    #[test]
    fn batch_pointer_loss_averages_over_all_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.5, 0.5]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[[1.0]]).unwrap());
        let p = pointer_loss_batch(&mut tape, &[a, b], &[vec![Some(0), Some(0)], vec![Some(0)]]).unwrap();
        assert_eq!(p.valid_rows, 3);
        assert!((tape.value(p.loss).item() - 2f64.ln() / 3.0).abs() < 1e-9);
        let p = pointer_loss_batch(&mut tape, &[a], &[vec![None, None]]).unwrap();
        assert!(p.no_valid_rows);
    }

    #[test]
    fn total_loss_composition() {
        let mut tape = Tape::new();
        let lm = tape.constant(Tensor::scalar(2.0));
        let a = tape.constant(Tensor::scalar(0.5));
        let b = tape.constant(Tensor::scalar(0.25));
        let l = total_loss(&mut tape, lm, &[a, b], 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        let l = total_loss(&mut tape, lm, &[a, b], 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 2.75);
        assert!(matches!(
            total_loss(&mut tape, lm, &[a], -0.1),
            Err(SyntaxError::NegativeLambda(_))
        ));
    }

    #[test]
    fn total_loss_gradient_through_attention_logits() {
        let logits = Tensor::from_rows(&[[0.3, 0.0, 0.0], [0.1, -0.4, 0.0], [0.9, 0.2, -0.3]]).unwrap();
        let head = Tensor::from_rows(&[[0.2, -0.1], [0.5, 0.3], [-0.7, 0.4]]).unwrap();
        let report = check_gradients(&[logits, head], |t, v| {
            let a = t.masked_softmax(v[0], &BoolMask::causal(3))?;
            let h = t.matmul(a, v[1])?;
            let lm = t.cross_entropy(h, &[1, 0, 1])?;
            let p = pointer_loss(t, a, &[Some(0), Some(0), None]).unwrap();
            Ok(total_loss(t, lm, &[p.loss, p.loss], 0.5).unwrap())
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
