// Brute-force reference implementations of the training losses, written as
// plain loops straight from the formulas. They are deliberately independent
// of the vectorized graph implementations they check.

#pragma once

#include <cmath>
#include <vector>

#include "duet/tensor.hpp"

namespace duet::oracle {

inline double dot(const Tensor& a, std::int64_t ra, const Tensor& b, std::int64_t rb) {
    std::int64_t d = a.shape[a.ndim() - 1];
    double s = 0.0;
    for (std::int64_t i = 0; i < d; ++i) s += a[ra * d + i] * b[rb * d + i];
    return s;
}

// InfoNCE by explicit softmax over [positive, negatives].
inline double info_nce(const std::vector<double>& q, const std::vector<double>& p,
                       const std::vector<std::vector<double>>& negs, double tau) {
    auto dotv = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    double num = std::exp(dotv(q, p) / tau);
    double den = num;
    for (const auto& n : negs) den += std::exp(dotv(q, n) / tau);
    return -std::log(num / den);
}

inline std::vector<double> similarity_distribution(const std::vector<double>& anchor,
                                                   const std::vector<std::vector<double>>& keys,
                                                   double tau_con) {
    auto dotv = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    std::vector<double> e;
    double z = 0.0;
    for (const auto& k : keys) {
        e.push_back(std::exp(dotv(anchor, k) / tau_con));
        z += e.back();
    }
    for (auto& v : e) v /= z;
    return e;
}

inline double consistency_kl(const std::vector<double>& P, const std::vector<double>& Q,
                             double floor = 1e-8) {
    double kl_pq = 0.0, kl_qp = 0.0;
    for (size_t i = 0; i < P.size(); ++i) {
        double lp = std::log(std::max(P[i], floor));
        double lq = std::log(std::max(Q[i], floor));
        kl_pq += P[i] * (lp - lq);
        kl_qp += Q[i] * (lq - lp);
    }
    return 0.5 * (kl_pq + kl_qp);
}

inline std::vector<double> row(const Tensor& t, std::int64_t r) {
    std::int64_t d = t.shape[1];
    return std::vector<double>(t.data.begin() + r * d, t.data.begin() + (r + 1) * d);
}

// CO2 by looping over batch rows: query = view_a[j], positive = view_b[j],
// negatives = view_b[k != j].
inline double co2_loss(const Tensor& view_a, const Tensor& view_b, double tau, double tau_con,
                       double beta) {
    std::int64_t n = view_a.shape[0];
    double total = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
        std::vector<double> q = row(view_a, j);
        std::vector<double> p = row(view_b, j);
        std::vector<std::vector<double>> negs;
        for (std::int64_t k = 0; k < n; ++k)
            if (k != j) negs.push_back(row(view_b, k));
        double nce = info_nce(q, p, negs, tau);
        auto P = similarity_distribution(p, negs, tau_con);
        auto Q = similarity_distribution(q, negs, tau_con);
        total += nce + beta * consistency_kl(P, Q);
    }
    return total / double(n);
}

// ITC by explicit double loops over the similarity matrix, both directions.
inline double itc_loss(const Tensor& z_img, const Tensor& z_txt, double tau) {
    std::int64_t n = z_img.shape[0];
    double img_term = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
        double num = std::exp(dot(z_img, j, z_txt, j) / tau);
        double den = 0.0;
        for (std::int64_t l = 0; l < n; ++l) den += std::exp(dot(z_img, j, z_txt, l) / tau);
        img_term += std::log(num / den);
    }
    double txt_term = 0.0;
    for (std::int64_t l = 0; l < n; ++l) {
        double num = std::exp(dot(z_img, l, z_txt, l) / tau);
        double den = 0.0;
        for (std::int64_t j = 0; j < n; ++j) den += std::exp(dot(z_img, j, z_txt, l) / tau);
        txt_term += std::log(num / den);
    }
    return -img_term / (2.0 * double(n)) - txt_term / (2.0 * double(n));
}

// Total objective composed from the oracles above.
inline double total_loss(const Tensor& z_img_aug, const Tensor& z_img_orig,
                         const Tensor& z_txt_orig, const Tensor& z_txt_aug, double tau,
                         double tau_con, double alpha, double beta, bool single_alpha) {
    double co2_img = oracle::co2_loss(z_img_aug, z_img_orig, tau, tau_con, beta);
    double co2_txt = oracle::co2_loss(z_txt_aug, z_txt_orig, tau, tau_con, beta);
    double sim = oracle::itc_loss(z_img_orig, z_txt_orig, tau);
    double con = single_alpha ? (co2_img + co2_txt) : alpha * (co2_img + co2_txt);
    return sim + alpha * con;
}

inline Tensor random_unit_rows(std::int64_t n, std::int64_t d, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t = Tensor::randn({n, d}, rng);
    for (std::int64_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::int64_t i = 0; i < d; ++i) s += t.at(r, i) * t.at(r, i);
        double nrm = std::sqrt(s);
        for (std::int64_t i = 0; i < d; ++i) t.at(r, i) /= nrm;
    }
    return t;
}

}  // namespace duet::oracle
