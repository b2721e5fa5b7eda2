#pragma once

#include <array>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gridfill/parallel.hpp"
#include "gridfill/sample.hpp"
#include "gridfill/seeds.hpp"

namespace gridfill {

/// Four batch positions in quadrant order: top-left, top-right, bottom-left,
/// bottom-right.
struct GridLayout {
  std::array<int, 4> members{};

  void validate(int batch_size) const {
    std::set<int> seen;
    for (int m : members) {
      if (m < 0 || m >= batch_size) throw ConfigError("grid layout member " + std::to_string(m) + " out of range");
      if (!seen.insert(m).second) throw ConfigError("grid layout repeats member " + std::to_string(m));
    }
  }
  friend bool operator==(const GridLayout&, const GridLayout&) = default;
};

/// Views to be sampled together. latents hold the initial noisy state; each
/// conditioning carries the known latent (unknown region zeroed) and the
/// binarized latent mask.
template <typename Scalar>
struct LatentBatch {
  std::vector<Tensor3<Scalar>> latents;
  std::vector<Conditioning<Scalar>> conds;
  std::vector<int> view_ids;
  /// Padding views appended to fill grids; their outputs are discarded.
  std::vector<bool> padded;

  int size() const { return int(latents.size()); }
  const Mask<Scalar>& mask(int i) const { return conds[i].mask; }

  void push_back(Tensor3<Scalar> latent, Conditioning<Scalar> cond, int view_id, bool is_pad = false) {
    latents.push_back(std::move(latent));
    conds.push_back(std::move(cond));
    view_ids.push_back(view_id);
    padded.push_back(is_pad);
  }

  void validate() const {
    if (latents.empty()) throw ConfigError("latent batch is empty");
    if (conds.size() != latents.size() || view_ids.size() != latents.size() || padded.size() != latents.size())
      throw ShapeError("latent batch fields have different lengths");
    for (int i = 0; i < size(); ++i) {
      require_same_shape(latents[0], latents[i], "latent batch");
      require_same_shape(latents[i], conds[i].image, "latent batch");
      require_mask_fits(latents[i], conds[i].mask, "latent batch");
    }
  }
};

/// Thresholds an averaged mask: > 0.5 is known, ties go to unknown.
template <typename Scalar>
Mask<Scalar> binarize(const Mask<Scalar>& m) {
  return (m > Scalar(0.5)).template cast<Scalar>();
}

/// Area-average downsampling by an integer factor per axis.
template <typename Scalar>
Tensor3<Scalar> downsample(const Tensor3<Scalar>& image, int factor) {
  if (factor < 1) throw ConfigError("downsample: factor must be positive");
  if (image.height() % factor != 0 || image.width() % factor != 0)
    throw ShapeError("downsample: size " + to_string(image.shape()) + " not divisible by " + std::to_string(factor));
  Tensor3<Scalar> out(Shape{image.height() / factor, image.width() / factor, image.channels()});
  const Scalar inv = Scalar(1) / Scalar(factor * factor);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      for (int c = 0; c < out.channels(); ++c) {
        Scalar acc = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += image(y * factor + dy, x * factor + dx, c);
        out(y, x, c) = acc * inv;
      }
  return out;
}

template <typename Scalar>
Mask<Scalar> downsample_mask(const Mask<Scalar>& mask, int factor) {
  if (factor < 1) throw ConfigError("downsample_mask: factor must be positive");
  if (mask.rows() % factor != 0 || mask.cols() % factor != 0) throw ShapeError("downsample_mask: size not divisible");
  Mask<Scalar> out(mask.rows() / factor, mask.cols() / factor);
  for (Eigen::Index y = 0; y < out.rows(); ++y)
    for (Eigen::Index x = 0; x < out.cols(); ++x)
      out(y, x) = mask.block(y * factor, x * factor, factor, factor).mean();
  return binarize(out);
}

/// Nearest-neighbour upsampling by an integer factor per axis.
template <typename Scalar>
Tensor3<Scalar> upsample_nearest(const Tensor3<Scalar>& image, int factor) {
  Tensor3<Scalar> out(Shape{image.height() * factor, image.width() * factor, image.channels()});
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      for (int c = 0; c < out.channels(); ++c) out(y, x, c) = image(y / factor, x / factor, c);
  return out;
}

/// Half resolution per axis (a quarter of the area) with a binarized mask.
template <typename Scalar>
std::pair<Tensor3<Scalar>, Mask<Scalar>> downsample_quarter(const Tensor3<Scalar>& image, const Mask<Scalar>& mask) {
  require_mask_fits(image, mask, "downsample_quarter");
  return {downsample(image, 2), downsample_mask(mask, 2)};
}

namespace detail {
inline std::array<std::pair<int, int>, 4> quadrant_offsets(int h, int w) { return {{{0, 0}, {0, w}, {h, 0}, {h, w}}}; }
}  // namespace detail

/// Places items[layout.members[q]] into quadrant q of a 2H x 2W grid.
template <typename Scalar>
Tensor3<Scalar> grid_tile(const std::vector<Tensor3<Scalar>>& items, const GridLayout& layout) {
  layout.validate(int(items.size()));
  const Tensor3<Scalar>& first = items[layout.members[0]];
  for (int m : layout.members) require_same_shape(first, items[m], "grid_tile");
  const int h = first.height(), w = first.width(), c = first.channels();
  Tensor3<Scalar> grid(Shape{2 * h, 2 * w, c});
  const auto off = detail::quadrant_offsets(h, w);
  for (int q = 0; q < 4; ++q) {
    const Tensor3<Scalar>& src = items[layout.members[q]];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int k = 0; k < c; ++k) grid(off[q].first + y, off[q].second + x, k) = src(y, x, k);
  }
  return grid;
}

template <typename Scalar>
Mask<Scalar> grid_tile(const std::vector<Mask<Scalar>>& masks, const GridLayout& layout) {
  layout.validate(int(masks.size()));
  const Eigen::Index h = masks[layout.members[0]].rows(), w = masks[layout.members[0]].cols();
  Mask<Scalar> grid(2 * h, 2 * w);
  const auto off = detail::quadrant_offsets(int(h), int(w));
  for (int q = 0; q < 4; ++q) {
    const Mask<Scalar>& m = masks[layout.members[q]];
    if (m.rows() != h || m.cols() != w) throw ShapeError("grid_tile: mask shape mismatch");
    grid.block(off[q].first, off[q].second, h, w) = m;
  }
  return grid;
}

/// Splits a grid back into its quadrants, in quadrant order.
template <typename Scalar>
std::array<Tensor3<Scalar>, 4> grid_untile(const Tensor3<Scalar>& grid) {
  if (grid.height() % 2 != 0 || grid.width() % 2 != 0)
    throw ShapeError("grid_untile: odd grid size " + to_string(grid.shape()));
  const int h = grid.height() / 2, w = grid.width() / 2, c = grid.channels();
  const auto off = detail::quadrant_offsets(h, w);
  std::array<Tensor3<Scalar>, 4> out;
  for (int q = 0; q < 4; ++q) {
    out[q] = Tensor3<Scalar>(Shape{h, w, c});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int k = 0; k < c; ++k) out[q](y, x, k) = grid(off[q].first + y, off[q].second + x, k);
  }
  return out;
}

/// Scatters the quadrants of a grid into items[layout.members[q]].
template <typename Scalar>
void grid_untile(const Tensor3<Scalar>& grid, const GridLayout& layout, std::vector<Tensor3<Scalar>>& items) {
  layout.validate(int(items.size()));
  auto quads = grid_untile(grid);
  for (int q = 0; q < 4; ++q) items[layout.members[q]] = std::move(quads[q]);
}

/// Fisher-Yates permutation of 0..n-1 chunked into consecutive quadruples.
std::vector<GridLayout> permute_into_grids(int n, Rng& rng);

/// Layouts that put the reference view in the top-left quadrant of every grid
/// and each other view in exactly one grid. With rng, the other views are
/// shuffled first.
std::vector<GridLayout> reference_layouts(int n, int reference_index, Rng* rng = nullptr);

/// Appends all-known copies of existing views until (size - offset) is a
/// multiple of `multiple`. The copies reuse the original conditioning image.
template <typename Scalar>
LatentBatch<Scalar> known_padding(LatentBatch<Scalar> batch, int multiple, int offset = 0) {
  if (multiple < 1) throw ConfigError("known_padding: multiple must be positive");
  if (batch.size() == 0) throw ConfigError("known_padding: empty batch");
  const int original = batch.size();
  for (int k = 0; (batch.size() - offset) % multiple != 0; ++k) {
    const int src = k % original;
    Conditioning<Scalar> cond = batch.conds[src];
    cond.mask.setOnes();
    batch.push_back(batch.latents[src], std::move(cond), batch.view_ids[src], true);
  }
  return batch;
}

struct JointSampleConfig {
  int m_repeats = 8;
  int num_steps = 20;
  int t_start = 1000;
  GuidanceScales scales;
  std::optional<int> reference_index;
  std::uint64_t seed = 0;
  /// Use these layouts at every step instead of random permutations.
  std::optional<std::vector<GridLayout>> fixed_layouts;
};

namespace detail {

inline std::vector<Rng> view_noise_streams(int n, std::uint64_t seed) {
  std::vector<Rng> streams;
  streams.reserve(n);
  const std::uint64_t base = derive_seed(seed, "enforce-noise");
  for (int i = 0; i < n; ++i) streams.emplace_back(derive_seed(base, std::uint64_t(i)));
  return streams;
}

template <typename Scalar>
Conditioning<Scalar> tile_conditioning(const LatentBatch<Scalar>& batch, const GridLayout& layout,
                                       const std::vector<Tensor3<Scalar>>& images,
                                       const std::vector<Mask<Scalar>>& masks) {
  Conditioning<Scalar> cond;
  cond.image = grid_tile(images, layout);
  cond.mask = grid_tile(masks, layout);
  cond.text = batch.conds[layout.members[0]].text;
  cond.tiled = true;
  return cond;
}

}  // namespace detail

/// Joint multi-view inpainting. At every DDIM step the batch is shuffled into
/// grids m_repeats times, each grid is denoised as one image, and every view
/// steps with the mean of the predictions it received.
template <typename Scalar>
std::vector<Tensor3<Scalar>> joint_inpaint(const DenoiserBackend<Scalar>& backend, LatentBatch<Scalar> batch,
                                           const JointSampleConfig& cfg, const NoiseSchedule& sched) {
  batch.validate();
  if (cfg.m_repeats < 1) throw ConfigError("joint_inpaint: m_repeats must be at least 1");
  const int n = batch.size();
  if (cfg.reference_index) {
    const int ref = *cfg.reference_index;
    if (ref < 0 || ref >= n) throw ConfigError("joint_inpaint: reference index out of range");
    batch.conds[ref].mask.setOnes();
  }
  if (cfg.fixed_layouts) {
    for (const auto& l : *cfg.fixed_layouts) l.validate(n);
  } else if (cfg.reference_index) {
    if ((n - 1) % 3 != 0) throw ConfigError("joint_inpaint: batch size must be 1 + 3k with a reference");
  } else if (n % 4 != 0) {
    throw ConfigError("joint_inpaint: batch size must be divisible by 4 (use known_padding)");
  }

  std::vector<Tensor3<Scalar>> known(n);
  std::vector<Mask<Scalar>> masks(n);
  for (int i = 0; i < n; ++i) {
    known[i] = batch.conds[i].image;
    masks[i] = batch.conds[i].mask;
  }

  std::vector<Rng> noise = detail::view_noise_streams(n, cfg.seed);
  Rng grid_rng(derive_seed(cfg.seed, "grid-permutation"));
  std::vector<Tensor3<Scalar>>& z = batch.latents;
  const std::vector<int> ts = ddim_timesteps(cfg.t_start, cfg.num_steps);

  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const int t = ts[k];
    for (int i = 0; i < n; ++i) {
      const Tensor3<Scalar> eps = randn<Scalar>(z[i].shape(), noise[i]);
      z[i] = enforce_known(z[i], known[i], masks[i], eps, t, sched);
    }

    std::vector<GridLayout> layouts;
    for (int m = 0; m < cfg.m_repeats; ++m) {
      std::vector<GridLayout> round;
      if (cfg.fixed_layouts)
        round = *cfg.fixed_layouts;
      else if (cfg.reference_index)
        round = reference_layouts(n, *cfg.reference_index, &grid_rng);
      else
        round = permute_into_grids(n, grid_rng);
      layouts.insert(layouts.end(), round.begin(), round.end());
    }

    std::vector<std::array<Tensor3<Scalar>, 4>> preds(layouts.size());
    parallel_for(layouts.size(), [&](std::size_t g) {
      const GridLayout& layout = layouts[g];
      const Conditioning<Scalar> cond = detail::tile_conditioning(batch, layout, known, masks);
      try {
        preds[g] = grid_untile(backend.predict_guided(grid_tile(z, layout), t, cond, cfg.scales));
      } catch (const std::exception& e) {
        throw BackendError("joint_inpaint step " + std::to_string(k) + " (t=" + std::to_string(t) + "), grid " +
                           std::to_string(g % (layouts.size() / cfg.m_repeats)) + " of repeat " +
                           std::to_string(g / (layouts.size() / cfg.m_repeats)) + ": " + e.what());
      }
    });

    std::vector<Tensor3<Scalar>> sum(n, Tensor3<Scalar>(z[0].shape()));
    std::vector<int> count(n, 0);
    for (std::size_t g = 0; g < layouts.size(); ++g)
      for (int q = 0; q < 4; ++q) {
        const int i = layouts[g].members[q];
        sum[i].values() += preds[g][q].values();
        ++count[i];
      }
    for (int i = 0; i < n; ++i) {
      if (count[i] == 0) throw ConfigError("joint_inpaint: view " + std::to_string(i) + " is in no grid");
      sum[i].values() /= Scalar(count[i]);
      z[i] = ddim_step(z[i], sum[i], t, ts[k + 1], sched);
    }
  }

  for (int i = 0; i < n; ++i) z[i] = blend(masks[i], known[i], z[i]);
  return std::move(batch.latents);
}

/// Per-view sampling with the same noise streams as joint_inpaint; no grids.
template <typename Scalar>
std::vector<Tensor3<Scalar>> independent_inpaint(const DenoiserBackend<Scalar>& backend, LatentBatch<Scalar> batch,
                                                 const JointSampleConfig& cfg, const NoiseSchedule& sched) {
  batch.validate();
  std::vector<Rng> noise = detail::view_noise_streams(batch.size(), cfg.seed);
  std::vector<Tensor3<Scalar>> out(batch.size());
  parallel_for(std::size_t(batch.size()), [&](std::size_t i) {
    Conditioning<Scalar> cond = batch.conds[i];
    cond.tiled = false;
    out[i] = sample(backend, batch.latents[i], cond, cfg.scales, cfg.num_steps, cfg.t_start, sched, noise[i]);
  });
  return out;
}

/// Single-grid sampling of four views: tile once, sample the grid as one image,
/// untile. Uses the same per-view noise streams as joint_inpaint.
template <typename Scalar>
std::vector<Tensor3<Scalar>> grid_prior_sample(const DenoiserBackend<Scalar>& backend, const LatentBatch<Scalar>& batch,
                                               const GridLayout& layout, const JointSampleConfig& cfg,
                                               const NoiseSchedule& sched) {
  batch.validate();
  if (batch.size() != 4) throw ConfigError("grid_prior_sample: needs exactly 4 views");
  layout.validate(4);
  std::vector<Tensor3<Scalar>> known(4);
  std::vector<Mask<Scalar>> masks(4);
  for (int i = 0; i < 4; ++i) {
    known[i] = batch.conds[i].image;
    masks[i] = batch.conds[i].mask;
  }
  const Conditioning<Scalar> cond = detail::tile_conditioning(batch, layout, known, masks);
  std::vector<Rng> noise = detail::view_noise_streams(4, cfg.seed);
  Tensor3<Scalar> z = grid_tile(batch.latents, layout);

  const std::vector<int> ts = ddim_timesteps(cfg.t_start, cfg.num_steps);
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    std::vector<Tensor3<Scalar>> eps(4);
    for (int i = 0; i < 4; ++i) eps[i] = randn<Scalar>(batch.latents[i].shape(), noise[i]);
    z = enforce_known(z, cond.image, cond.mask, grid_tile(eps, layout), ts[k], sched);
    z = ddim_step(z, backend.predict_guided(z, ts[k], cond, cfg.scales), ts[k], ts[k + 1], sched);
  }
  z = blend(cond.mask, cond.image, z);
  std::vector<Tensor3<Scalar>> out(4);
  grid_untile(z, layout, out);
  return out;
}

}  // namespace gridfill
