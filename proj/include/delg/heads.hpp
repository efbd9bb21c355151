#pragma once

#include "delg/autodiff.hpp"
#include "delg/backbone.hpp"

namespace delg {

// Whitened GeM descriptor of the deep map: projection * GeM_p(deep) + bias.
// Unnormalized on purpose; callers normalize when they need the unit vector.
inline Node* global_descriptor(Graph& g, Node* deep, Node* projection,
                               Node* bias, double power) {
  return g.fully_connected(g.gem_pool(deep, power), projection, bias);
}

// Two 1x1 conv layers over the shallow map, ReLU then Softplus, squeezed to
// an HxW score map. Softplus keeps every score strictly positive.
inline Node* attention_scores(Graph& g, Node* shallow,
                              const ConvParamNodes& first,
                              const ConvParamNodes& second) {
  Node* hidden = g.relu(g.bias_add(
      g.conv2d(shallow, first.kernel, 1, Padding::same), first.bias));
  Node* raw = g.softplus(g.bias_add(
      g.conv2d(hidden, second.kernel, 1, Padding::same), second.bias));
  const Tensor& v = raw->value;
  if (v.dim(2) != 1)
    fail(ErrorKind::shape,
         "attention_scores: final conv must have one output channel");
  return g.reshape(raw, {v.dim(0), v.dim(1)});
}

// Autoencoder over the shallow map. The code is a linear 1x1 projection and
// may go negative; the reconstruction passes through ReLU and cannot.
inline Node* encode(Graph& g, Node* shallow, const ConvParamNodes& enc) {
  return g.bias_add(g.conv2d(shallow, enc.kernel, 1, Padding::same), enc.bias);
}

inline Node* decode(Graph& g, Node* code, const ConvParamNodes& dec) {
  return g.relu(
      g.bias_add(g.conv2d(code, dec.kernel, 1, Padding::same), dec.bias));
}

}  // namespace delg
