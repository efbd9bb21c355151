#pragma once

#include <algorithm>
#include <cmath>

#include "delg/autodiff.hpp"

namespace delg {

enum class GradientControl { stop_gradients, naive };

struct LossWeights {
  double lambda_rec = 10.0;
  double beta_attn = 1.0;
};

// Scalar form of the margin adjustment: cos(acos(u)+m) on the target class,
// identity otherwise. The graph op in Graph::arcface_adjust applies the same
// formula to one entry of a logit vector.
inline double arcface_adjust(double u, bool is_target, double margin) {
  if (!is_target) return u;
  const double uc =
      std::clamp(u, -detail::kCosineClamp, detail::kCosineClamp);
  return std::cos(std::acos(uc) + margin);
}

// Margin-adjusted cosine classifier loss. `weights` rows must be unit-norm
// (maintained by the optimizer), `unit_descriptor` must be L2-normalized, so
// the matvec yields cosines.
inline Node* global_loss(Graph& g, Node* unit_descriptor, int label,
                         Node* weights, Node* gamma, double margin) {
  Node* cosines = g.matvec(weights, unit_descriptor);
  Node* adjusted = g.arcface_adjust(cosines, label, margin);
  Node* logits = g.scale_by(adjusted, gamma);
  return g.cross_entropy(logits, label);
}

// Mean squared reconstruction error with 1/(H*W*C) normalization.
inline Node* reconstruction_loss(Graph& g, Node* reconstruction,
                                 Node* target) {
  return g.mse(reconstruction, target);
}

// Plain softmax cross-entropy over attention-pooled features.
inline Node* attention_loss(Graph& g, Node* pooled, int label,
                            Node* classifier_weights, Node* classifier_bias) {
  Node* logits =
      g.fully_connected(pooled, classifier_weights, classifier_bias);
  return g.cross_entropy(logits, label);
}

}  // namespace delg
