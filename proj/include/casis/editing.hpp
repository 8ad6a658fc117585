#pragma once

// Reconstruction and class-level editing. All operations run without autograd
// and return new tensors; inputs are never modified.

#include <optional>
#include <set>
#include <string>

#include "casis/model.hpp"

namespace casis {

/// Rows of `classes` taken from `donor`, all other rows from `base`. Both [N,C,S].
template <class T>
StyleCodes<T> mix_style_rows(const StyleCodes<T>& base, const StyleCodes<T>& donor,
                             const std::set<std::size_t>& classes) {
  if (base.shape() != donor.shape())
    throw DimensionError("mix_style_rows: " + shape_str(base.shape()) + " vs " + shape_str(donor.shape()));
  const std::size_t N = base.dim(0), C = base.dim(1), S = base.dim(2);
  for (auto c : classes)
    if (c >= C) throw ArgumentError("mix_style_rows: class " + std::to_string(c) + " out of range");
  std::vector<T> out(base.values());
  const auto& d = donor.values();
  for (std::size_t n = 0; n < N; ++n)
    for (auto c : classes)
      std::copy_n(d.begin() + static_cast<std::ptrdiff_t>((n * C + c) * S), S,
                  out.begin() + static_cast<std::ptrdiff_t>((n * C + c) * S));
  return Tensor<T>(base.shape(), std::move(out));
}

namespace detail {

template <class T>
Tensor<T> batch_of(const Tensor<T>& image) {
  if (image.rank() == 4) return image;
  if (image.rank() != 3) throw DimensionError("expected an image [3,H,W] or batch [N,3,H,W]");
  return reshape(image.detach(), {1, image.dim(0), image.dim(1), image.dim(2)});
}

template <class T>
Tensor<T> batch_of(const SemanticMask& mask) {
  const SemanticMask m[] = {mask};
  return mask_batch<T>(m);
}

template <class T>
void check_classes(const Model<T>& model, const std::set<std::size_t>& classes) {
  for (auto c : classes)
    if (c >= model.config().num_classes)
      throw ArgumentError("class " + std::to_string(c) + " outside 0.." +
                          std::to_string(model.config().num_classes - 1));
}

}  // namespace detail

template <class T>
GeneratedSample<T> reconstruct(const Model<T>& model, const Tensor<T>& image, const SemanticMask& mask) {
  NoGradGuard ng;
  const Tensor<T> m = detail::batch_of<T>(mask);
  return model.reconstruct(detail::batch_of(image), m);
}

/// Styles of `classes` from the reference, the rest from the target; target geometry.
template <class T>
GeneratedSample<T> transfer_style(const Model<T>& model, const Tensor<T>& target_image, const SemanticMask& target_mask,
                                  const Tensor<T>& ref_image, const SemanticMask& ref_mask,
                                  const std::set<std::size_t>& classes) {
  NoGradGuard ng;
  detail::check_classes(model, classes);
  const Tensor<T> tm = detail::batch_of<T>(target_mask);
  const StyleCodes<T> own = model.styles(detail::batch_of(target_image), tm);
  const StyleCodes<T> ref = model.styles(detail::batch_of(ref_image), detail::batch_of<T>(ref_mask));
  return model.generate(model.embed(tm), mix_style_rows(own, ref, classes), tm);
}

/// Mask embeddings of `classes` from the reference mask; styles from the target.
template <class T>
GeneratedSample<T> transfer_shape(const Model<T>& model, const Tensor<T>& target_image, const SemanticMask& target_mask,
                                  const SemanticMask& ref_mask, const std::set<std::size_t>& classes) {
  NoGradGuard ng;
  detail::check_classes(model, classes);
  const Tensor<T> tm = detail::batch_of<T>(target_mask);
  const StyleCodes<T> own = model.styles(detail::batch_of(target_image), tm);
  const MaskEmbedding<T> e = swap_embedding_rows(model.embed(tm), model.embed(detail::batch_of<T>(ref_mask)), classes);
  return model.generate(e, own, tm);
}

/// Embeddings of `classes` become alpha*embed(mask1) + (1-alpha)*embed(mask2);
/// the target image is styled under mask1.
template <class T>
GeneratedSample<T> interpolate_shape(const Model<T>& model, const Tensor<T>& target_image, const SemanticMask& mask1,
                                     const SemanticMask& mask2, const std::set<std::size_t>& classes, double alpha) {
  NoGradGuard ng;
  detail::check_classes(model, classes);
  const Tensor<T> m1 = detail::batch_of<T>(mask1);
  const StyleCodes<T> own = model.styles(detail::batch_of(target_image), m1);
  const MaskEmbedding<T> e =
      interpolate_embeddings(model.embed(m1), model.embed(detail::batch_of<T>(mask2)), classes, alpha);
  return model.generate(e, own, m1);
}

enum class EditMode { style, shape, shape_interpolate };

template <class T>
struct EditRequest {
  Tensor<T> target_image;
  SemanticMask target_mask;
  Tensor<T> ref_image;  // unused by shape modes
  SemanticMask ref_mask;
  std::set<std::size_t> classes;
  EditMode mode = EditMode::style;
  std::optional<double> alpha;

  void validate() const {
    if (classes.empty()) throw ArgumentError("edit: classes must not be empty");
    if (alpha.has_value() != (mode == EditMode::shape_interpolate))
      throw ArgumentError("edit: alpha is required for shape interpolation and only there");
  }
};

template <class T>
GeneratedSample<T> apply_edit(const Model<T>& model, const EditRequest<T>& r) {
  r.validate();
  switch (r.mode) {
    case EditMode::style:
      return transfer_style(model, r.target_image, r.target_mask, r.ref_image, r.ref_mask, r.classes);
    case EditMode::shape:
      return transfer_shape(model, r.target_image, r.target_mask, r.ref_mask, r.classes);
    case EditMode::shape_interpolate:
      return interpolate_shape(model, r.target_image, r.target_mask, r.ref_mask, r.classes, *r.alpha);
  }
  throw ArgumentError("edit: unknown mode");
}

}  // namespace casis
