#pragma once

// Flat binary array container ("VCNO") plus JSON meta files.
//
// Array file layout, little endian:
//   magic "VCNO" | u16 version | u8 dtype (1=f32, 2=f64) | u8 rank |
//   u64 dims[rank] | row-major payload
//
// Datasets, checkpoints and episode records are directories holding one
// array file per tensor and a `meta` JSON file describing them.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace vcnode {

inline constexpr char kContainerMagic[4] = {'V', 'C', 'N', 'O'};
inline constexpr std::uint16_t kContainerVersion = 1;

enum class Dtype : std::uint8_t { f32 = 1, f64 = 2 };

struct NdArray {
  Dtype dtype = Dtype::f32;
  std::vector<std::uint64_t> dims;
  std::vector<float> f32;
  std::vector<double> f64;

  std::size_t element_count() const;

  static NdArray from_matrix(const Eigen::MatrixXf& m);
  static NdArray from_matrix(const Eigen::MatrixXd& m);
  static NdArray from_vector(const Eigen::VectorXf& v);
  static NdArray from_vector(const Eigen::VectorXd& v);
  // Stack of equally shaped matrices -> rank-3 [count, rows, cols].
  static NdArray from_stack(const std::vector<Eigen::MatrixXf>& ms);

  Eigen::MatrixXf as_matrix_f() const;   // rank 1 or 2
  Eigen::MatrixXd as_matrix_d() const;
  Eigen::VectorXd as_vector_d() const;   // rank 1
  std::vector<Eigen::MatrixXf> as_stack_f() const;  // rank 3
};

void save_array(const std::filesystem::path& path, const NdArray& arr);
NdArray load_array(const std::filesystem::path& path);

void save_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json load_json(const std::filesystem::path& path);

// FNV-1a over raw bytes; used to fingerprint normalizers and configs.
std::uint64_t fnv1a(const void* data, std::size_t n);

}  // namespace vcnode
