#pragma once

#include <string>
#include <utility>
#include <vector>

#include "delg/autodiff.hpp"

namespace delg {

struct LayerSpec {
  int kernel = 3;
  int channels = 16;
  int stride = 1;
  bool residual = false;  // adds the block input back before the ReLU
};

// A small residual trunk with two tap points. The shallow tap feeds the
// attention/autoencoder branch, the deep tap feeds the global descriptor.
struct BackboneConfig {
  std::vector<LayerSpec> blocks;
  int tap_shallow = 0;
  int tap_deep = 0;
  int input_size = 64;

  // 8 conv layers in 4 stages, downsampling to /8 at the shallow tap
  // (8x8x64 on a 64px input) and /16 at the deep tap (4x4x128)
  static BackboneConfig desk_default() {
    BackboneConfig cfg;
    const int widths[4] = {16, 32, 64, 128};
    for (int stage = 0; stage < 4; ++stage) {
      cfg.blocks.push_back({3, widths[stage], 2, false});
      cfg.blocks.push_back({3, widths[stage], 1, true});
    }
    cfg.tap_shallow = 5;
    cfg.tap_deep = 7;
    cfg.input_size = 64;
    return cfg;
  }

  int channels_at(int tap) const { return blocks[size_t(tap)].channels; }
  int shallow_channels() const { return channels_at(tap_shallow); }
  int deep_channels() const { return channels_at(tap_deep); }

  int stride_to(int tap) const {
    int s = 1;
    for (int i = 0; i <= tap; ++i) s *= blocks[size_t(i)].stride;
    return s;
  }

  int min_input_side() const { return stride_to(tap_deep); }

  void validate() const {
    if (blocks.empty())
      fail(ErrorKind::config, "backbone: no blocks configured");
    if (tap_shallow < 0 || tap_deep >= int(blocks.size()) ||
        tap_shallow >= tap_deep)
      fail(ErrorKind::config,
           "backbone: taps must satisfy 0 <= shallow < deep < blocks");
    if (deep_channels() < shallow_channels())
      fail(ErrorKind::config,
           "backbone: deep tap must have at least as many channels as the "
           "shallow tap");
    if (stride_to(tap_deep) < stride_to(tap_shallow))
      fail(ErrorKind::config,
           "backbone: deep tap cannot have higher resolution than shallow");
    int ch = 3;
    for (size_t i = 0; i < blocks.size(); ++i) {
      const LayerSpec& b = blocks[i];
      if (b.kernel < 1 || b.stride < 1 || b.channels < 1)
        fail(ErrorKind::config,
             "backbone: invalid layer spec at block " + std::to_string(i));
      if (b.residual && (b.stride != 1 || b.channels != ch))
        fail(ErrorKind::config,
             "backbone: residual block " + std::to_string(i) +
                 " needs stride 1 and matching channels");
      ch = b.channels;
    }
  }
};

// Composed receptive-field geometry of a tap: every output position (h,w)
// looks at a size x size input window starting at
// effective_stride*(h,w) - effective_padding.
struct ReceptiveField {
  int size = 1;
  int effective_stride = 1;
  int effective_padding = 0;
};

inline ReceptiveField compose_receptive_field(const ReceptiveField& rf,
                                              int kernel, int stride,
                                              int padding) {
  ReceptiveField out;
  out.size = rf.size + (kernel - 1) * rf.effective_stride;
  out.effective_padding = rf.effective_padding + padding * rf.effective_stride;
  out.effective_stride = rf.effective_stride * stride;
  return out;
}

inline ReceptiveField receptive_field_of(const BackboneConfig& cfg, int tap) {
  if (tap < 0 || tap >= int(cfg.blocks.size()))
    fail(ErrorKind::precondition, "receptive_field_of: bad tap index");
  ReceptiveField rf;
  for (int i = 0; i <= tap; ++i) {
    const LayerSpec& b = cfg.blocks[size_t(i)];
    rf = compose_receptive_field(rf, b.kernel, b.stride, (b.kernel - 1) / 2);
  }
  return rf;
}

// Maps a feature-map position to its receptive-field center in
// original-image pixels (x = column axis, y = row axis). Positions produced
// at pyramid scale s are divided back by s so keypoints from all scales live
// in one coordinate frame.
inline std::pair<double, double> keypoint_center(int h, int w,
                                                 const ReceptiveField& rf,
                                                 double image_scale) {
  if (image_scale <= 0.0)
    fail(ErrorKind::precondition, "keypoint_center: scale must be positive");
  const double half = (rf.size - 1) / 2.0;
  const double y = (rf.effective_stride * h + half - rf.effective_padding) /
                   image_scale;
  const double x = (rf.effective_stride * w + half - rf.effective_padding) /
                   image_scale;
  return {x, y};
}

struct ConvParamNodes {
  Node* kernel = nullptr;
  Node* bias = nullptr;
};

struct FeatureMaps {
  Node* shallow = nullptr;
  Node* deep = nullptr;
};

// Runs the trunk on an HWC image (or NHWC batch) already bound to the graph.
// Both taps are taken after the ReLU, so they are elementwise non-negative.
inline FeatureMaps backbone_forward(Graph& g, Node* image,
                                    const BackboneConfig& cfg,
                                    const std::vector<ConvParamNodes>& params) {
  cfg.validate();
  if (params.size() != cfg.blocks.size())
    fail(ErrorKind::precondition, "backbone_forward: expected " +
                                      std::to_string(cfg.blocks.size()) +
                                      " parameter blocks, got " +
                                      std::to_string(params.size()));
  const Tensor& v = image->value;
  const bool batched = v.rank() == 4;
  if (v.rank() != 3 && v.rank() != 4)
    fail(ErrorKind::shape,
         "backbone_forward: expected HWC or NHWC image, got " + v.shape_str());
  const int side_h = v.dim(batched ? 1 : 0);
  const int side_w = v.dim(batched ? 2 : 1);
  if (side_h != side_w)
    fail(ErrorKind::precondition, "backbone_forward: image must be square, got " +
                                      v.shape_str());
  if (side_h < cfg.min_input_side())
    fail(ErrorKind::precondition,
         "backbone_forward: image side " + std::to_string(side_h) +
             " below minimum " + std::to_string(cfg.min_input_side()));
  for (double px : v.data)
    if (px < 0.0 || px > 1.0)
      fail(ErrorKind::precondition,
           "backbone_forward: pixel values must lie in [0,1]");

  FeatureMaps maps;
  Node* x = image;
  for (int i = 0; i < int(cfg.blocks.size()); ++i) {
    const LayerSpec& b = cfg.blocks[size_t(i)];
    Node* y = g.conv2d(x, params[size_t(i)].kernel, b.stride, Padding::same);
    y = g.bias_add(y, params[size_t(i)].bias);
    if (b.residual) y = g.add(y, x);
    x = g.relu(y);
    if (i == cfg.tap_shallow) maps.shallow = x;
    if (i == cfg.tap_deep) maps.deep = x;
  }
  return maps;
}

}  // namespace delg
