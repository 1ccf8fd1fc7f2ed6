#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "duet/autograd.hpp"
#include "duet/config.hpp"

namespace duet {

// Probabilities are floored at this value before any logarithm in the KL
// terms; keeps extreme temperatures finite.
constexpr double kProbFloor = 1e-8;

// The four projected, unit-normalized embeddings for one batch.
struct BranchEmbeddings {
    Tensor z_img_aug;   // [N, d]
    Tensor z_img_orig;  // [N, d]
    Tensor z_txt_orig;  // [N, d]
    Tensor z_txt_aug;   // [N, d]

    void validate() const {
        const Tensor* all[4] = {&z_img_aug, &z_img_orig, &z_txt_orig, &z_txt_aug};
        for (const Tensor* t : all) {
            if (t->ndim() != 2 || !t->same_shape(z_img_orig))
                throw input_error("branch embeddings must share shape [N, d]");
            std::int64_t d = t->shape[1];
            for (std::int64_t r = 0; r < t->shape[0]; ++r) {
                double s = 0.0;
                for (std::int64_t i = 0; i < d; ++i) s += t->at(r, i) * t->at(r, i);
                if (std::abs(std::sqrt(s) - 1.0) > 1e-6)
                    throw input_error("branch embedding row " + std::to_string(r) + " is not unit-norm");
            }
        }
    }
};

struct LossReport {
    double l_nce_img = 0.0;
    double l_nce_txt = 0.0;
    double l_cons_img = 0.0;
    double l_cons_txt = 0.0;
    double l_co2_img = 0.0;
    double l_co2_txt = 0.0;
    double l_con = 0.0;
    double l_sim_it = 0.0;
    double l_total = 0.0;

    // Fixed field order shared by headers and log lines.
    static const std::array<const char*, 9>& field_names() {
        static const std::array<const char*, 9> names = {
            "l_nce_img", "l_nce_txt", "l_cons_img", "l_cons_txt", "l_co2_img",
            "l_co2_txt", "l_con",     "l_sim_it",   "l_total"};
        return names;
    }
    std::array<double, 9> fields() const {
        return {l_nce_img, l_nce_txt, l_cons_img, l_cons_txt, l_co2_img,
                l_co2_txt, l_con,     l_sim_it,   l_total};
    }
};

// ─── Scalar loss primitives ──────────────────────────────────────────────────

// InfoNCE: -log( exp(q.p/t) / (exp(q.p/t) + sum_k exp(q.n_k/t)) ).
inline double info_nce(const Tensor& q, const Tensor& p, const Tensor& negatives, double tau) {
    if (negatives.ndim() != 2 || negatives.shape[0] < 1)
        throw input_error("info_nce: need at least one negative key");
    std::int64_t d = q.numel();
    if (p.numel() != d || negatives.shape[1] != d) throw input_error("info_nce: dimension mismatch");
    if (tau <= 0.0) throw input_error("info_nce: temperature must be positive");
    std::int64_t K = negatives.shape[0];
    std::vector<double> scores(size_t(K) + 1);
    double s0 = 0.0;
    for (std::int64_t i = 0; i < d; ++i) s0 += q[i] * p[i];
    scores[0] = s0 / tau;
    for (std::int64_t k = 0; k < K; ++k) {
        double s = 0.0;
        for (std::int64_t i = 0; i < d; ++i) s += q[i] * negatives.at(k, i);
        scores[size_t(k) + 1] = s / tau;
    }
    double hi = scores[0];
    for (double s : scores) hi = std::max(hi, s);
    double z = 0.0;
    for (double s : scores) z += std::exp(s - hi);
    return -(scores[0] - hi - std::log(z));
}

// Softmax of anchor.negatives / tau_con; computes both Q (anchor = query)
// and P (anchor = positive).
inline std::vector<double> similarity_distribution(const Tensor& anchor, const Tensor& negatives,
                                                   double tau_con) {
    if (negatives.ndim() != 2 || negatives.shape[0] < 1)
        throw input_error("similarity_distribution: need at least one key");
    std::int64_t d = anchor.numel();
    if (negatives.shape[1] != d) throw input_error("similarity_distribution: dimension mismatch");
    std::int64_t K = negatives.shape[0];
    std::vector<double> out(static_cast<size_t>(K));
    for (std::int64_t k = 0; k < K; ++k) {
        double s = 0.0;
        for (std::int64_t i = 0; i < d; ++i) s += anchor[i] * negatives.at(k, i);
        out[size_t(k)] = s / tau_con;
    }
    double hi = out[0];
    for (double s : out) hi = std::max(hi, s);
    double z = 0.0;
    for (auto& s : out) {
        s = std::exp(s - hi);
        z += s;
    }
    for (auto& s : out) s /= z;
    return out;
}

// Symmetric KL: (KL(P||Q) + KL(Q||P)) / 2 with epsilon-floored logs.
inline double consistency_kl(const std::vector<double>& P, const std::vector<double>& Q) {
    if (P.size() != Q.size()) throw input_error("consistency_kl: length mismatch");
    double sp = 0.0, sq = 0.0;
    for (size_t i = 0; i < P.size(); ++i) {
        sp += P[i];
        sq += Q[i];
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
        throw input_error("consistency_kl: inputs must sum to 1");
    double kl_pq = 0.0, kl_qp = 0.0;
    for (size_t i = 0; i < P.size(); ++i) {
        double lp = std::log(std::max(P[i], kProbFloor));
        double lq = std::log(std::max(Q[i], kProbFloor));
        kl_pq += P[i] * (lp - lq);
        kl_qp += Q[i] * (lq - lp);
    }
    return 0.5 * (kl_pq + kl_qp);
}

// ─── Batched graph losses ────────────────────────────────────────────────────
// view_a is the augmented (query) view, view_b the original (positive/key)
// view. For sample j the positive is view_b[j] and the negatives are the
// other rows of view_b.

namespace loss_detail {

inline Tensor offdiag_mask(std::int64_t n) {
    Tensor m = Tensor::full({n, n}, 1.0);
    for (std::int64_t i = 0; i < n; ++i) m.at(i, i) = 0.0;
    return m;
}

}  // namespace loss_detail

// CO2 for one modality. Outputs the contrastive and consistency means through
// the optional pointers for reporting.
inline ag::Var co2_loss_graph(const ag::Var& view_a, const ag::Var& view_b, double tau,
                              double tau_con, double beta, double* nce_out = nullptr,
                              double* cons_out = nullptr) {
    const auto& sa = view_a.shape();
    const auto& sb = view_b.shape();
    if (sa.size() != 2 || sa != sb) throw input_error("co2_loss: views must share shape [N, d]");
    std::int64_t n = sa[0];
    if (n < 2) throw input_error("co2_loss: batch must have at least 2 rows for in-batch negatives");

    ag::Var cross = ag::matmul(view_a, ag::transpose_last2(view_b));  // q_j . key_k
    ag::Var nce = ag::scale(ag::mean_all(ag::diag(ag::log_softmax_lastdim(ag::scale(cross, 1.0 / tau)))), -1.0);

    Tensor mask = loss_detail::offdiag_mask(n);
    ag::Var q_dist = ag::softmax_lastdim(ag::scale(cross, 1.0 / tau_con), &mask);
    ag::Var within = ag::matmul(view_b, ag::transpose_last2(view_b));  // p_j . key_k
    ag::Var p_dist = ag::softmax_lastdim(ag::scale(within, 1.0 / tau_con), &mask);

    ag::Var log_p = ag::log_floor(p_dist, kProbFloor);
    ag::Var log_q = ag::log_floor(q_dist, kProbFloor);
    ag::Var kl_pq = ag::sum_lastdim(ag::mul(p_dist, ag::sub(log_p, log_q)));
    ag::Var kl_qp = ag::sum_lastdim(ag::mul(q_dist, ag::sub(log_q, log_p)));
    ag::Var cons = ag::scale(ag::mean_all(ag::add(kl_pq, kl_qp)), 0.5);

    if (nce_out) *nce_out = nce.val()[0];
    if (cons_out) *cons_out = cons.val()[0];
    return ag::add(nce, ag::scale(cons, beta));
}

// Bidirectional image-text contrastive loss over the batch similarity matrix,
// diagonal entries as positives.
inline ag::Var itc_loss_graph(const ag::Var& z_img, const ag::Var& z_txt, double tau) {
    const auto& si = z_img.shape();
    const auto& st = z_txt.shape();
    if (si.size() != 2 || si != st) throw input_error("itc_loss: embeddings must share shape [N, d]");
    if (si[0] < 1) throw input_error("itc_loss: empty batch");
    ag::Var sim = ag::scale(ag::matmul(z_img, ag::transpose_last2(z_txt)), 1.0 / tau);
    ag::Var img_to_txt = ag::mean_all(ag::diag(ag::log_softmax_lastdim(sim)));
    ag::Var txt_to_img = ag::mean_all(ag::diag(ag::log_softmax_lastdim(ag::transpose_last2(sim))));
    return ag::scale(ag::add(img_to_txt, txt_to_img), -0.5);
}

inline double co2_loss(const Tensor& view_a, const Tensor& view_b, double tau, double tau_con,
                       double beta) {
    return co2_loss_graph(ag::constant(view_a), ag::constant(view_b), tau, tau_con, beta).val()[0];
}

inline double itc_loss(const Tensor& z_img, const Tensor& z_txt, double tau) {
    return itc_loss_graph(ag::constant(z_img), ag::constant(z_txt), tau).val()[0];
}

// ─── Total objective ─────────────────────────────────────────────────────────
// Default wiring applies alpha inside the consistency sum and again as the
// total-loss weight, exactly as the two formulas compose. single_alpha
// collapses that to l_sim + alpha * (co2_img + co2_txt); in both modes the
// report satisfies l_total = l_sim_it + alpha * l_con.

struct BranchVars {
    ag::Var z_img_aug, z_img_orig, z_txt_orig, z_txt_aug;
};

inline ag::Var total_loss_graph(const BranchVars& b, const ModelConfig& cfg, bool single_alpha,
                                LossReport* report = nullptr) {
    LossReport r;
    ag::Var co2_img = co2_loss_graph(b.z_img_aug, b.z_img_orig, cfg.temperature,
                                     cfg.consistency_temperature, cfg.beta, &r.l_nce_img, &r.l_cons_img);
    ag::Var co2_txt = co2_loss_graph(b.z_txt_aug, b.z_txt_orig, cfg.temperature,
                                     cfg.consistency_temperature, cfg.beta, &r.l_nce_txt, &r.l_cons_txt);
    ag::Var sim_it = itc_loss_graph(b.z_img_orig, b.z_txt_orig, cfg.temperature);

    ag::Var con = ag::add(co2_img, co2_txt);
    if (!single_alpha) con = ag::scale(con, cfg.alpha);
    ag::Var total = ag::add(sim_it, ag::scale(con, cfg.alpha));

    r.l_co2_img = co2_img.val()[0];
    r.l_co2_txt = co2_txt.val()[0];
    r.l_con = con.val()[0];
    r.l_sim_it = sim_it.val()[0];
    r.l_total = total.val()[0];
    if (report) *report = r;
    return total;
}

inline LossReport total_loss(const BranchEmbeddings& b, const ModelConfig& cfg,
                             bool single_alpha = false) {
    BranchVars v{ag::constant(b.z_img_aug), ag::constant(b.z_img_orig), ag::constant(b.z_txt_orig),
                 ag::constant(b.z_txt_aug)};
    LossReport r;
    total_loss_graph(v, cfg, single_alpha, &r);
    return r;
}

}  // namespace duet
