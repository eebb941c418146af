//! Training losses with analytic gradients.
//!
//! Each loss returns its scalar value together with a gradient bundle
//! populated only for the parameter blocks that loss trains:
//!
//! * classification on the labeled source: backbone, bottleneck, classifier;
//! * information maximization and pseudo-label classification on the
//!   unlabeled sources: backbone, bottleneck (and the classifier's raw
//!   gradient, which the trainer drops before updating — pseudo labels are
//!   not allowed to train the classifier);
//! * feature projection: the projection networks only, with both the
//!   target features and the projection inputs treated as constants;
//! * bias filtering: classifier, attention embeddings, the gate, and the
//!   projection networks, again over constant projection inputs.
//!
//! Values are batch means, so the stage weights stay batch-size
//! independent. Logs are clamped at 1e-12 to survive confidently wrong
//! predictions.

use crate::attention::{accumulate_into, attention_backward, attention_forward};
use crate::networks::{stack_backward, GradBundle, ModelBundle};
use crate::numerics::{softmax_rows, Matrix};

const LOG_CLAMP: f64 = 1e-12;

fn safe_ln(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

/// A loss value and the gradients of every parameter block it trains.
pub struct LossValue {
    pub value: f64,
    pub grads: GradBundle,
}

/// Cross-entropy of the labeled source batch, mean over the batch.
pub fn loss_cl(model: &ModelBundle, x: &Matrix, y_onehot: &Matrix) -> LossValue {
    let batch = x.rows() as f64;
    let cache = model.forward_cached(x);
    let probs = softmax_rows(&cache.logits).expect("non-empty logits");

    let mut value = 0.0;
    let mut d_logits = probs.clone();
    for i in 0..probs.rows() {
        for r in 0..probs.cols() {
            let y = y_onehot.get(i, r);
            if y != 0.0 {
                value -= y * safe_ln(probs.get(i, r));
            }
            d_logits.set(i, r, (probs.get(i, r) - y) / batch);
        }
    }
    value /= batch;

    let mut grads = GradBundle::zeros_like(model);
    let (c_grad, d_feat) = model
        .classifier
        .backward(&cache.features, &cache.c_pre, &d_logits);
    grads.classifier = c_grad;
    let (b_grads, d_backbone) = stack_backward(&model.bottleneck, &cache.b_cache, &d_feat);
    grads.bottleneck = b_grads;
    let (g_grads, _) = stack_backward(&model.backbone, &cache.g_cache, &d_backbone);
    grads.backbone = g_grads;
    grads.active.backbone = true;
    grads.active.bottleneck = true;
    grads.active.classifier = true;
    LossValue { value, grads }
}

/// Information maximization over the unlabeled source batches: batch-mean
/// predictions should be diverse across classes while every individual
/// prediction should be confident. Value per domain is
/// `sum_r t_r ln t_r - mean_i sum_r u_ir ln u_ir`, averaged over domains.
pub fn loss_im(model: &ModelBundle, unlabeled: &[&Matrix]) -> LossValue {
    let domains = unlabeled.len() as f64;
    let mut value = 0.0;
    let mut grads = GradBundle::zeros_like(model);
    for x in unlabeled {
        let batch = x.rows() as f64;
        let cache = model.forward_cached(x);
        let probs = softmax_rows(&cache.logits).expect("non-empty logits");
        let classes = probs.cols();

        let mut t = vec![0.0; classes];
        for i in 0..probs.rows() {
            for (tr, p) in t.iter_mut().zip(probs.row(i)) {
                *tr += p;
            }
        }
        for tr in &mut t {
            *tr /= batch;
        }
        let diverse: f64 = t.iter().map(|&tr| tr * safe_ln(tr)).sum();
        let mut concentrated = 0.0;
        for i in 0..probs.rows() {
            for &u in probs.row(i) {
                concentrated += u * safe_ln(u);
            }
        }
        concentrated /= batch;
        value += (diverse - concentrated) / domains;

        // d/du_ir = (ln t_r - ln u_ir) / (batch * domains), then the
        // softmax Jacobian maps it back to the logits.
        let mut d_logits = Matrix::zeros(probs.rows(), classes);
        for i in 0..probs.rows() {
            let mut du = vec![0.0; classes];
            for (r, du_r) in du.iter_mut().enumerate() {
                *du_r = (safe_ln(t[r]) - safe_ln(probs.get(i, r))) / (batch * domains);
            }
            let weighted: f64 = du
                .iter()
                .zip(probs.row(i))
                .map(|(d, u)| d * u)
                .sum();
            for r in 0..classes {
                d_logits.set(i, r, probs.get(i, r) * (du[r] - weighted));
            }
        }

        let (c_grad, d_feat) = model
            .classifier
            .backward(&cache.features, &cache.c_pre, &d_logits);
        grads.classifier.add_scaled(&c_grad, 1.0);
        let (b_grads, d_backbone) = stack_backward(&model.bottleneck, &cache.b_cache, &d_feat);
        for (dst, src) in grads.bottleneck.iter_mut().zip(&b_grads) {
            dst.add_scaled(src, 1.0);
        }
        let (g_grads, _) = stack_backward(&model.backbone, &cache.g_cache, &d_backbone);
        for (dst, src) in grads.backbone.iter_mut().zip(&g_grads) {
            dst.add_scaled(src, 1.0);
        }
    }
    grads.active.backbone = true;
    grads.active.bottleneck = true;
    grads.active.classifier = true;
    LossValue { value, grads }
}

/// Cross-entropy of the unlabeled sources against their pseudo labels,
/// averaged over domains. The returned classifier gradient is the true
/// partial derivative; the trainer zeroes it before the update.
pub fn loss_cu(model: &ModelBundle, batches: &[(&Matrix, &Matrix)]) -> LossValue {
    let domains = batches.len() as f64;
    let mut value = 0.0;
    let mut grads = GradBundle::zeros_like(model);
    for (x, pseudo_onehot) in batches {
        let batch = x.rows() as f64;
        let cache = model.forward_cached(x);
        let probs = softmax_rows(&cache.logits).expect("non-empty logits");
        let mut d_logits = Matrix::zeros(probs.rows(), probs.cols());
        for i in 0..probs.rows() {
            for r in 0..probs.cols() {
                let y = pseudo_onehot.get(i, r);
                if y != 0.0 {
                    value -= y * safe_ln(probs.get(i, r)) / (batch * domains);
                }
                d_logits.set(i, r, (probs.get(i, r) - y) / (batch * domains));
            }
        }
        let (c_grad, d_feat) = model
            .classifier
            .backward(&cache.features, &cache.c_pre, &d_logits);
        grads.classifier.add_scaled(&c_grad, 1.0);
        let (b_grads, d_backbone) = stack_backward(&model.bottleneck, &cache.b_cache, &d_feat);
        for (dst, src) in grads.bottleneck.iter_mut().zip(&b_grads) {
            dst.add_scaled(src, 1.0);
        }
        let (g_grads, _) = stack_backward(&model.backbone, &cache.g_cache, &d_backbone);
        for (dst, src) in grads.backbone.iter_mut().zip(&g_grads) {
            dst.add_scaled(src, 1.0);
        }
    }
    grads.active.backbone = true;
    grads.active.bottleneck = true;
    grads.active.classifier = true;
    LossValue { value, grads }
}

/// Count of positionally matched pairs per domain.
fn match_count(matches: &[bool]) -> usize {
    matches.iter().filter(|&&s| s).count()
}

/// Feature projection loss: squared distance between the labeled batch's
/// semantic features and each domain's projected features over matched
/// pairs. Mean over matched pairs within a domain; domains with no
/// matches contribute nothing and are excluded from the domain average.
/// Gradients flow only into the projection networks: `target_feats` and
/// `proj_inputs` are constants computed from the frozen step snapshot.
pub fn loss_fp(
    model: &ModelBundle,
    target_feats: &Matrix,
    proj_inputs: &[Matrix],
    matches: &[Vec<bool>],
) -> LossValue {
    let mut grads = GradBundle::zeros_like(model);
    grads.active.projections = true;
    let matched_domains = matches.iter().filter(|m| match_count(m) > 0).count();
    if matched_domains == 0 {
        return LossValue { value: 0.0, grads };
    }
    let outer = matched_domains as f64;
    let mut value = 0.0;
    for (j, (input, s)) in proj_inputs.iter().zip(matches).enumerate() {
        let m_j = match_count(s);
        if m_j == 0 {
            continue;
        }
        let (proj, pre) = model.projections[j].forward_cached(input);
        let mut d_proj = Matrix::zeros(proj.rows(), proj.cols());
        let mut term = 0.0;
        for i in 0..proj.rows() {
            if !s[i] {
                continue;
            }
            for d in 0..proj.cols() {
                let diff = target_feats.get(i, d) - proj.get(i, d);
                term += diff * diff;
                d_proj.set(i, d, 2.0 * (proj.get(i, d) - target_feats.get(i, d)) / (m_j as f64 * outer));
            }
        }
        value += term / (m_j as f64 * outer);
        let (v_grad, _) = model.projections[j].backward(input, &pre, &d_proj);
        grads.projections[j].add_scaled(&v_grad, 1.0);
    }
    LossValue { value, grads }
}

/// Bias filtering loss: cross-entropy of the attention-reweighted
/// projections against the labeled batch's labels over matched pairs,
/// averaged over all unlabeled domains. Trains the classifier, the
/// attention module (embeddings and gate), and the projections;
/// projection inputs are constants from the frozen step snapshot.
pub fn loss_bf(
    model: &ModelBundle,
    proj_inputs: &[Matrix],
    y_onehot: &Matrix,
    matches: &[Vec<bool>],
    alpha_eff: f64,
) -> LossValue {
    let domains = proj_inputs.len();
    let mut grads = GradBundle::zeros_like(model);
    grads.active.classifier = true;
    grads.active.attention = true;
    grads.active.alpha = true;
    grads.active.projections = true;

    let mut proj = Vec::with_capacity(domains);
    let mut proj_pre = Vec::with_capacity(domains);
    for (j, input) in proj_inputs.iter().enumerate() {
        let (p, pre) = model.projections[j].forward_cached(input);
        proj.push(p);
        proj_pre.push(pre);
    }
    let (q, attn_cache) = attention_forward(model, &proj, alpha_eff);

    let mut value = 0.0;
    let mut d_q = Vec::with_capacity(domains);
    for (m, q_m) in q.iter().enumerate() {
        let (logits, c_pre) = model.classifier.forward_cached(q_m);
        let probs = softmax_rows(&logits).expect("non-empty logits");
        let s = &matches[m];
        let m_count = match_count(s);
        let mut d_logits = Matrix::zeros(probs.rows(), probs.cols());
        if m_count > 0 {
            let norm = m_count as f64 * domains as f64;
            for i in 0..probs.rows() {
                if !s[i] {
                    continue;
                }
                for r in 0..probs.cols() {
                    let y = y_onehot.get(i, r);
                    if y != 0.0 {
                        value -= y * safe_ln(probs.get(i, r)) / norm;
                    }
                    d_logits.set(i, r, (probs.get(i, r) - y) / norm);
                }
            }
        }
        let (c_grad, d_q_m) = model.classifier.backward(q_m, &c_pre, &d_logits);
        grads.classifier.add_scaled(&c_grad, 1.0);
        d_q.push(d_q_m);
    }

    let attn_grads = attention_backward(model, &attn_cache, &d_q);
    accumulate_into(&mut grads, &attn_grads);
    for (j, d_proj) in attn_grads.d_projections.iter().enumerate() {
        let (v_grad, _) = model.projections[j].backward(&proj_inputs[j], &proj_pre[j], d_proj);
        grads.projections[j].add_scaled(&v_grad, 1.0);
    }
    LossValue { value, grads }
}

/// Merged stage objectives: stage 1 is the labeled cross-entropy alone;
/// stage 2 is `lambda * (im + cu) + gamma * (fp + bf)`.
pub fn stage_losses(
    lambda: f64,
    gamma: f64,
    l_cl: f64,
    l_im: f64,
    l_cu: f64,
    l_fp: f64,
    l_bf: f64,
) -> (f64, f64) {
    (l_cl, lambda * (l_im + l_cu) + gamma * (l_fp + l_bf))
}
