#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "duet/autograd.hpp"

namespace duet::nn {

// Named parameter registry. Creation order is the deterministic iteration
// order; names partition the freeze/tune sets and key the checkpoint.
class ParamStore {
  public:
    ag::Var create(const std::string& name, Tensor init) {
        if (by_name_.count(name)) throw config_error("duplicate parameter name: " + name);
        ag::Var v = ag::Var::leaf(std::move(init), true);
        order_.push_back(name);
        by_name_.emplace(name, v);
        return v;
    }

    bool has(const std::string& name) const { return by_name_.count(name) != 0; }

    ag::Var& get(const std::string& name) {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw config_error("unknown parameter: " + name);
        return it->second;
    }
    const ag::Var& get(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw config_error("unknown parameter: " + name);
        return it->second;
    }

    const std::vector<std::string>& names() const { return order_; }

    void zero_grads() {
        for (auto& name : order_) by_name_.at(name).zero_grad();
    }

  private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, ag::Var> by_name_;
};

struct Linear {
    ag::Var weight;  // [in, out]
    ag::Var bias;    // [out]

    Linear() = default;
    // Default init scales with fan-in so activations keep unit variance.
    Linear(ParamStore& ps, const std::string& prefix, int in, int out, Rng& rng, double stddev = -1.0) {
        if (stddev <= 0.0) stddev = 1.0 / std::sqrt(double(in));
        weight = ps.create(prefix + ".weight", Tensor::randn({in, out}, rng, stddev));
        bias = ps.create(prefix + ".bias", Tensor::zeros({out}));
    }

    ag::Var operator()(const ag::Var& x) const { return ag::add(ag::matmul(x, weight), bias); }
};

struct LayerNorm {
    ag::Var gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& prefix, int dim) {
        gamma = ps.create(prefix + ".gamma", Tensor::full({dim}, 1.0));
        beta = ps.create(prefix + ".beta", Tensor::zeros({dim}));
    }

    ag::Var operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma, beta); }
};

struct AttentionOutput {
    ag::Var tokens;
    Tensor weights;  // [B, H, Sq, Sk], detached
};

// Multi-head attention; key/value side may live in a different embedding
// space than the query side (cross-attention across modalities).
struct MultiHeadAttention {
    int heads = 0;
    int head_dim = 0;
    Linear wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore& ps, const std::string& prefix, int query_dim, int key_dim,
                       int num_heads, Rng& rng) {
        if (query_dim % num_heads != 0)
            throw config_error("attention: query dim not divisible by head count");
        heads = num_heads;
        head_dim = query_dim / num_heads;
        wq = Linear(ps, prefix + ".wq", query_dim, query_dim, rng);
        wk = Linear(ps, prefix + ".wk", key_dim, query_dim, rng);
        wv = Linear(ps, prefix + ".wv", key_dim, query_dim, rng);
        wo = Linear(ps, prefix + ".wo", query_dim, query_dim, rng);
    }

    // query [B,Sq,Dq], keyval [B,Sk,Dk]; key_mask [B,Sk] with 1 = attend.
    AttentionOutput operator()(const ag::Var& query, const ag::Var& keyval,
                               const Tensor* key_mask = nullptr) const {
        std::int64_t B = query.shape()[0], Sq = query.shape()[1];
        std::int64_t Sk = keyval.shape()[1];
        std::int64_t H = heads, Dh = head_dim;

        auto split = [&](const ag::Var& x, std::int64_t S) {
            return ag::transpose_12(ag::reshape(x, {B, S, H, Dh}));  // [B,H,S,Dh]
        };
        ag::Var q = split(wq(query), Sq);
        ag::Var k = split(wk(keyval), Sk);
        ag::Var v = split(wv(keyval), Sk);

        ag::Var scores = ag::scale(ag::matmul(q, ag::transpose_last2(k)), 1.0 / std::sqrt(double(Dh)));

        Tensor full_mask;
        const Tensor* mask_ptr = nullptr;
        if (key_mask) {
            if (key_mask->ndim() != 2 || key_mask->shape[0] != B || key_mask->shape[1] != Sk)
                throw input_error("attention: key mask must be [batch, key_len]");
            full_mask = Tensor({B, H, Sq, Sk});
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t i = 0; i < Sq; ++i)
                        for (std::int64_t j = 0; j < Sk; ++j)
                            full_mask.at(b, h, i, j) = key_mask->at(b, j);
            mask_ptr = &full_mask;
        }

        ag::Var attn = ag::softmax_lastdim(scores, mask_ptr);
        ag::Var ctx = ag::reshape(ag::transpose_12(ag::matmul(attn, v)), {B, Sq, H * Dh});
        return {wo(ctx), ag::detach(attn)};
    }
};

// Standard pre-norm transformer block: x += MHA(LN(x)); x += MLP(LN(x)).
struct TransformerBlock {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    Linear fc1, fc2;

    TransformerBlock() = default;
    TransformerBlock(ParamStore& ps, const std::string& prefix, int dim, int num_heads, Rng& rng) {
        ln1 = LayerNorm(ps, prefix + ".ln1", dim);
        attn = MultiHeadAttention(ps, prefix + ".attn", dim, dim, num_heads, rng);
        ln2 = LayerNorm(ps, prefix + ".ln2", dim);
        fc1 = Linear(ps, prefix + ".mlp.fc1", dim, 4 * dim, rng);
        fc2 = Linear(ps, prefix + ".mlp.fc2", 4 * dim, dim, rng);
    }

    AttentionOutput operator()(const ag::Var& x, const Tensor* key_mask = nullptr) const {
        ag::Var normed = ln1(x);
        AttentionOutput att = attn(normed, normed, key_mask);
        ag::Var h = ag::add(x, att.tokens);
        ag::Var out = ag::add(h, fc2(ag::gelu(fc1(ln2(h)))));
        return {out, std::move(att.weights)};
    }
};

}  // namespace duet::nn
