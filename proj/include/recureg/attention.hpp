// Bidirectional mutual attention between two feature grids.
//
// For a key stream F^k and a query stream F^q (both c x n after flattening):
//
//   logits = (W_q F^k)^T (W_k F^q) / sqrt(c_head)        (n_k x n_q)
//   Phi    = softmax over the key axis of logits           (columns sum to 1)
//   F^v    = W_v F^k
//   F^{k->q} = F^v Phi                                     (c_head x n_q)
//
// W_q is applied to the key stream and W_k to the query stream, exactly as the
// method defines it. Each query position thus receives a convex combination
// of value vectors. Multiple heads are concatenated along channels and mixed
// back to c channels by a learned merge matrix.
#pragma once

#include <utility>
#include <vector>

#include "recureg/autodiff.hpp"
#include "recureg/core.hpp"

namespace recureg::attention {

struct HeadProjection {
    Tensor query; // (c_head, c)
    Tensor key;   // (c_head, c)
    Tensor value; // (c_head, c)
};

struct ProjectionParams {
    std::vector<HeadProjection> heads;
    Tensor merge; // (c_out, heads * c_head)

    int input_channels() const;
    int head_channels() const;
    // Throws on inconsistent shapes or non-finite entries.
    void validate() const;
};

// Per-position matrix-vector product; W is (c_out, c).
FeatureGrid project(const FeatureGrid &f, const Tensor &w);
IndicatorMatrix indicator_matrix(const FeatureGrid &f_k, const FeatureGrid &f_q, const ProjectionParams &p, int head);
// Single-head retrieval F^{k->q} (before the merge matrix); spatial shape of f_q.
FeatureGrid mutual_attention(const FeatureGrid &f_k, const FeatureGrid &f_q, const ProjectionParams &p, int head);
// All heads concatenated then merged.
FeatureGrid multi_head_attention(const FeatureGrid &f_k, const FeatureGrid &f_q, const ProjectionParams &p);
// Returns (F^{t->s}, F^{s->t}): features each stream retrieves from the other.
std::pair<FeatureGrid, FeatureGrid> bidirectional_exchange(const FeatureGrid &f_s, const FeatureGrid &f_t,
                                                           const ProjectionParams &p);

// ---- differentiable variants ----

struct HeadVars {
    ad::Var query, key, value;
};

struct ProjectionVars {
    std::vector<HeadVars> heads;
    ad::Var merge;
};

ProjectionVars bind(const ProjectionParams &p, bool requires_grad);

ad::Var project(const ad::Var &f, const ad::Var &w);
ad::Var indicator_matrix(const ad::Var &f_k, const ad::Var &f_q, const HeadVars &head);
ad::Var mutual_attention(const ad::Var &f_k, const ad::Var &f_q, const HeadVars &head);
ad::Var multi_head_attention(const ad::Var &f_k, const ad::Var &f_q, const ProjectionVars &p);
std::pair<ad::Var, ad::Var> bidirectional_exchange(const ad::Var &f_s, const ad::Var &f_t, const ProjectionVars &p);

} // namespace recureg::attention
