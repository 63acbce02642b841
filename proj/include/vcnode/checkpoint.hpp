#pragma once

// Checkpoint directories: a `manifest` JSON plus one container array per
// named tensor. Loading validates that names and shapes match expectations.

#include <filesystem>

#include "vcnode/container.hpp"
#include "vcnode/nets.hpp"

namespace vcnode {

template <typename S>
void save_params(const std::filesystem::path& dir, const approx::ParamSet<S>& params) {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < params.count(); ++i) {
    const auto& name = params.names()[i];
    const auto& v = params.value(i);
    tensors.push_back({{"name", name}, {"rows", v.rows()}, {"cols", v.cols()}});
    if constexpr (std::is_same_v<S, float>)
      save_array(dir / (name + ".vcno"), NdArray::from_matrix(Eigen::MatrixXf(v)));
    else
      save_array(dir / (name + ".vcno"), NdArray::from_matrix(Eigen::MatrixXd(v)));
  }
  save_json(dir / "tensors", tensors);
}

template <typename S>
approx::ParamSet<S> load_params(const std::filesystem::path& dir) {
  const auto tensors = load_json(dir / "tensors");
  approx::ParamSet<S> params;
  for (const auto& t : tensors) {
    const auto name = t.at("name").get<std::string>();
    const auto arr = load_array(dir / (name + ".vcno"));
    approx::Mat<S> v;
    if constexpr (std::is_same_v<S, float>) {
      if (arr.dtype != Dtype::f32)
        throw std::runtime_error("checkpoint tensor " + name + " is not f32");
      v = arr.as_matrix_f();
    } else {
      v = arr.as_matrix_d().cast<S>();
    }
    if (v.rows() != t.at("rows").get<Eigen::Index>() ||
        v.cols() != t.at("cols").get<Eigen::Index>())
      throw std::runtime_error("checkpoint tensor " + name + " has a mismatched shape");
    params.add(name, std::move(v));
  }
  return params;
}

// Validates that `params` carries exactly the names and shapes of `expect`.
template <typename S>
void validate_like(const approx::ParamSet<S>& params, const approx::ParamSet<S>& expect) {
  if (params.count() != expect.count())
    throw std::runtime_error("checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < expect.count(); ++i) {
    const auto& name = expect.names()[i];
    if (!params.has(name)) throw std::runtime_error("checkpoint: missing tensor " + name);
    if (params.at(name).rows() != expect.at(name).rows() ||
        params.at(name).cols() != expect.at(name).cols())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
  }
}

}  // namespace vcnode
