use super::log_add;
use crate::error::{Error, Result};
use crate::model::LogProbMatrix;
use crate::tensor::{Graph, Scalar, Var};
use crate::tokenizer::min_ctc_frames;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Negative log-likelihood of `target` under `logp`, summed over every
/// alignment, and its gradient with respect to each entry of `logp`
/// (frame-major, like the input).
///
/// The entries of `logp` are treated as free variables, so the gradient is
/// minus the state occupancy; chaining through a log-softmax is left to the
/// caller.
pub fn ctc_loss(logp: &LogProbMatrix, target: &[u32]) -> Result<(f64, Vec<f64>)> {
    let (frames, classes) = (logp.frames(), logp.classes());
    let blank = logp.blank();
    if let Some(&bad) = target.iter().find(|&&id| id as usize >= blank) {
        return Err(Error::InvalidArgument(format!("target id {bad} is not below the blank index {blank}")));
    }
    let required = min_ctc_frames(target);
    if frames < required || frames == 0 {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            required: required.max(1),
            frames,
        });
    }

    // blank-interleaved labels: blank, y1, blank, y2, ..., blank
    let states = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] as usize };
    let skip_allowed = |s: usize| s >= 2 && label(s) != blank && label(s) != label(s - 2);
    let emit = |t: usize, s: usize| logp.get(t, label(s));

    let mut alpha = vec![NEG_INF; frames * states];
    alpha[0] = emit(0, 0);
    if states > 1 {
        alpha[1] = emit(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_allowed(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = acc + emit(t, s);
        }
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![NEG_INF; frames * states];
    let last = (frames - 1) * states;
    beta[last + states - 1] = 0.0;
    if states > 1 {
        beta[last + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = |s2: usize| beta[(t + 1) * states + s2] + emit(t + 1, s2);
            let mut acc = next(s);
            if s + 1 < states {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < states && skip_allowed(s + 2) {
                acc = log_add(acc, next(s + 2));
            }
            beta[t * states + s] = acc;
        }
    }

    let mut log_like = alpha[last + states - 1];
    if states > 1 {
        log_like = log_add(log_like, alpha[last + states - 2]);
    }
    if !log_like.is_finite() {
        return Err(Error::NonFinite("CTC likelihood".into()));
    }

    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..states {
            let occ = alpha[t * states + s] + beta[t * states + s] - log_like;
            if occ > NEG_INF {
                grad[t * classes + label(s)] -= occ.exp();
            }
        }
    }
    Ok((-log_like, grad))
}

/// CTC loss of a `[classes×frames]` log-probability node as a scalar graph
/// node, so the gradient flows back through the network.
pub fn ctc_loss_graph<T: Scalar>(g: &mut Graph<T>, logp: Var, target: &[u32]) -> Result<Var> {
    let shape = g.shape(logp).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("CTC expects [classes×frames], got {shape:?}")));
    }
    let matrix = LogProbMatrix::from_class_major(shape[0], shape[1], g.value(logp))?;
    let (loss, grad) = ctc_loss(&matrix, target)?;
    let grad = crate::model::transpose_to_class_major(&grad, shape[1], shape[0]);
    g.external_scalar(logp, T::lit(loss), grad)
}
