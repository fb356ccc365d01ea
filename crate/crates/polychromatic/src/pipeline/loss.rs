//! Chunked cross-entropy over a large vocabulary.
//!
//! Logits are materialized at most `chunk_size` rows at a time in both the
//! forward and backward pass; the backward recomputes each chunk's softmax
//! rather than keeping the full [N, vocab] matrix alive.

use crate::tensor::{kernel, Scalar, Tensor};

use super::PipelineError;

/// Mean negative log-likelihood over mask-true positions.
///
/// `hidden` is [N, d_model], `head` is [vocab, d_model] (logits are
/// `hidden · headᵀ`), `targets` and `loss_mask` have length N.
pub fn chunked_cross_entropy<T: Scalar>(
    hidden: &Tensor<T>,
    head: &Tensor<T>,
    targets: &[u32],
    loss_mask: &[bool],
    chunk_size: usize,
) -> Result<Tensor<T>, PipelineError> {
    if chunk_size == 0 {
        return Err(PipelineError::Loss("chunk_size must be at least 1".into()));
    }
    if hidden.rank() != 2 || head.rank() != 2 {
        return Err(PipelineError::Loss(format!(
            "expected 2D hidden and head, got {:?} and {:?}",
            hidden.shape(),
            head.shape()
        )));
    }
    let (n, d) = (hidden.shape()[0], hidden.shape()[1]);
    let (vocab, d_head) = (head.shape()[0], head.shape()[1]);
    if d != d_head {
        return Err(PipelineError::Loss(format!(
            "hidden dim {d} does not match head dim {d_head}"
        )));
    }
    if targets.len() != n || loss_mask.len() != n {
        return Err(PipelineError::Loss(format!(
            "{} targets / {} mask entries for {n} positions",
            targets.len(),
            loss_mask.len()
        )));
    }
    for &t in targets {
        if t as usize >= vocab {
            return Err(PipelineError::Loss(format!(
                "target id {t} out of range for vocab {vocab}"
            )));
        }
    }
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(PipelineError::Loss(
            "loss mask is all false; the mean is undefined".into(),
        ));
    }

    let hidden_data = hidden.data();
    let head_data = head.data();
    let mut total = T::zero();
    for start in (0..n).step_by(chunk_size) {
        let end = (start + chunk_size).min(n);
        let rows = end - start;
        let logits = kernel_logits(&hidden_data, &head_data, start, rows, d, vocab);
        for r in 0..rows {
            let i = start + r;
            if !loss_mask[i] {
                continue;
            }
            let row = &logits[r * vocab..(r + 1) * vocab];
            let lse = kernel::logsumexp(row);
            total = total + lse - row[targets[i] as usize];
        }
    }
    drop(hidden_data);
    drop(head_data);
    let inv_count = T::one() / T::from_usize(count);
    let loss = total * inv_count;

    let targets_owned: Vec<u32> = targets.to_vec();
    let mask_owned: Vec<bool> = loss_mask.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![hidden.clone(), head.clone()],
        move |args| {
            let hidden = &args.parents[0];
            let head = &args.parents[1];
            let scale = args.out_grad[0] * inv_count;
            let hidden_data = hidden.data();
            let head_data = head.data();
            let mut d_hidden = if hidden.needs_grad() {
                Some(vec![T::zero(); n * d])
            } else {
                None
            };
            let mut d_head = if head.needs_grad() {
                Some(vec![T::zero(); vocab * d])
            } else {
                None
            };
            for start in (0..n).step_by(chunk_size) {
                let end = (start + chunk_size).min(n);
                let rows = end - start;
                let mut logits = kernel_logits(&hidden_data, &head_data, start, rows, d, vocab);
                // dlogits = (softmax − one-hot(target)) · scale on masked rows
                for r in 0..rows {
                    let i = start + r;
                    let row = &mut logits[r * vocab..(r + 1) * vocab];
                    if !mask_owned[i] {
                        row.fill(T::zero());
                        continue;
                    }
                    kernel::softmax_inplace(row);
                    row[targets_owned[i] as usize] = row[targets_owned[i] as usize] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                if let Some(dh) = d_hidden.as_mut() {
                    kernel::matmul_acc(
                        &logits,
                        &head_data,
                        &mut dh[start * d..end * d],
                        rows,
                        vocab,
                        d,
                    );
                }
                if let Some(dw) = d_head.as_mut() {
                    kernel::matmul_tn_acc(
                        &logits,
                        &hidden_data[start * d..end * d],
                        dw,
                        rows,
                        vocab,
                        d,
                    );
                }
            }
            drop(hidden_data);
            drop(head_data);
            if let Some(dh) = d_hidden {
                hidden.accumulate_grad(&dh);
            }
            if let Some(dw) = d_head {
                head.accumulate_grad(&dw);
            }
        },
    ))
}

/// logits[r, :] = hidden[start + r, :] · headᵀ for `rows` rows.
fn kernel_logits<T: Scalar>(
    hidden: &[T],
    head: &[T],
    start: usize,
    rows: usize,
    d: usize,
    vocab: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * vocab];
    kernel::matmul_nt_acc(
        &hidden[start * d..(start + rows) * d],
        head,
        &mut out,
        rows,
        d,
        vocab,
    );
    out
}
