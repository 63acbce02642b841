#include "vcnode/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "container format assumes a little-endian host");

namespace vcnode {

namespace {

void write_bytes(std::ofstream& f, const void* p, std::size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& f, void* p, std::size_t n,
                const std::filesystem::path& path) {
  f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!f) throw std::runtime_error("short read in " + path.string());
}

}  // namespace

std::size_t NdArray::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= static_cast<std::size_t>(d);
  return dims.empty() ? 0 : n;
}

NdArray NdArray::from_matrix(const Eigen::MatrixXf& m) {
  NdArray a;
  a.dtype = Dtype::f32;
  a.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  a.f32.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      a.f32[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return a;
}

NdArray NdArray::from_matrix(const Eigen::MatrixXd& m) {
  NdArray a;
  a.dtype = Dtype::f64;
  a.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  a.f64.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      a.f64[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return a;
}

NdArray NdArray::from_vector(const Eigen::VectorXf& v) {
  NdArray a;
  a.dtype = Dtype::f32;
  a.dims = {static_cast<std::uint64_t>(v.size())};
  a.f32.assign(v.data(), v.data() + v.size());
  return a;
}

NdArray NdArray::from_vector(const Eigen::VectorXd& v) {
  NdArray a;
  a.dtype = Dtype::f64;
  a.dims = {static_cast<std::uint64_t>(v.size())};
  a.f64.assign(v.data(), v.data() + v.size());
  return a;
}

NdArray NdArray::from_stack(const std::vector<Eigen::MatrixXf>& ms) {
  NdArray a;
  a.dtype = Dtype::f32;
  const std::uint64_t count = ms.size();
  const std::uint64_t rows = count ? static_cast<std::uint64_t>(ms[0].rows()) : 0;
  const std::uint64_t cols = count ? static_cast<std::uint64_t>(ms[0].cols()) : 0;
  a.dims = {count, rows, cols};
  a.f32.reserve(static_cast<std::size_t>(count * rows * cols));
  for (const auto& m : ms) {
    if (static_cast<std::uint64_t>(m.rows()) != rows ||
        static_cast<std::uint64_t>(m.cols()) != cols)
      throw std::invalid_argument("from_stack: ragged stack");
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) a.f32.push_back(m(r, c));
  }
  return a;
}

Eigen::MatrixXf NdArray::as_matrix_f() const {
  if (dtype != Dtype::f32) throw std::runtime_error("as_matrix_f: dtype is not f32");
  Eigen::Index rows, cols;
  if (dims.size() == 1) {
    rows = static_cast<Eigen::Index>(dims[0]);
    cols = 1;
  } else if (dims.size() == 2) {
    rows = static_cast<Eigen::Index>(dims[0]);
    cols = static_cast<Eigen::Index>(dims[1]);
  } else {
    throw std::runtime_error("as_matrix_f: rank must be 1 or 2");
  }
  Eigen::MatrixXf m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = f32[static_cast<std::size_t>(r * cols + c)];
  return m;
}

Eigen::MatrixXd NdArray::as_matrix_d() const {
  if (dtype == Dtype::f32) return as_matrix_f().cast<double>();
  Eigen::Index rows, cols;
  if (dims.size() == 1) {
    rows = static_cast<Eigen::Index>(dims[0]);
    cols = 1;
  } else if (dims.size() == 2) {
    rows = static_cast<Eigen::Index>(dims[0]);
    cols = static_cast<Eigen::Index>(dims[1]);
  } else {
    throw std::runtime_error("as_matrix_d: rank must be 1 or 2");
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = f64[static_cast<std::size_t>(r * cols + c)];
  return m;
}

Eigen::VectorXd NdArray::as_vector_d() const {
  if (dims.size() != 1) throw std::runtime_error("as_vector_d: rank must be 1");
  Eigen::VectorXd v(static_cast<Eigen::Index>(dims[0]));
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v[i] = dtype == Dtype::f32 ? static_cast<double>(f32[static_cast<std::size_t>(i)])
                               : f64[static_cast<std::size_t>(i)];
  return v;
}

std::vector<Eigen::MatrixXf> NdArray::as_stack_f() const {
  if (dims.size() != 3) throw std::runtime_error("as_stack_f: rank must be 3");
  if (dtype != Dtype::f32) throw std::runtime_error("as_stack_f: dtype is not f32");
  const auto count = static_cast<std::size_t>(dims[0]);
  const auto rows = static_cast<Eigen::Index>(dims[1]);
  const auto cols = static_cast<Eigen::Index>(dims[2]);
  std::vector<Eigen::MatrixXf> out(count, Eigen::MatrixXf(rows, cols));
  std::size_t k = 0;
  for (std::size_t i = 0; i < count; ++i)
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) out[i](r, c) = f32[k++];
  return out;
}

void save_array(const std::filesystem::path& path, const NdArray& arr) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path.string());
  write_bytes(f, kContainerMagic, 4);
  write_bytes(f, &kContainerVersion, 2);
  const auto dtype = static_cast<std::uint8_t>(arr.dtype);
  const auto rank = static_cast<std::uint8_t>(arr.dims.size());
  write_bytes(f, &dtype, 1);
  write_bytes(f, &rank, 1);
  write_bytes(f, arr.dims.data(), arr.dims.size() * sizeof(std::uint64_t));
  if (arr.dtype == Dtype::f32) {
    if (arr.f32.size() != arr.element_count())
      throw std::runtime_error("save_array: dims/payload mismatch");
    write_bytes(f, arr.f32.data(), arr.f32.size() * sizeof(float));
  } else {
    if (arr.f64.size() != arr.element_count())
      throw std::runtime_error("save_array: dims/payload mismatch");
    write_bytes(f, arr.f64.data(), arr.f64.size() * sizeof(double));
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

NdArray load_array(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  char magic[4];
  read_bytes(f, magic, 4, path);
  if (std::memcmp(magic, kContainerMagic, 4) != 0)
    throw std::runtime_error("bad magic in " + path.string());
  std::uint16_t version;
  read_bytes(f, &version, 2, path);
  if (version != kContainerVersion)
    throw std::runtime_error("unsupported container version in " + path.string());
  std::uint8_t dtype, rank;
  read_bytes(f, &dtype, 1, path);
  read_bytes(f, &rank, 1, path);
  if (dtype != 1 && dtype != 2) throw std::runtime_error("bad dtype in " + path.string());
  NdArray arr;
  arr.dtype = static_cast<Dtype>(dtype);
  arr.dims.resize(rank);
  read_bytes(f, arr.dims.data(), rank * sizeof(std::uint64_t), path);
  const std::size_t n = arr.element_count();
  if (arr.dtype == Dtype::f32) {
    arr.f32.resize(n);
    read_bytes(f, arr.f32.data(), n * sizeof(float), path);
  } else {
    arr.f64.resize(n);
    read_bytes(f, arr.f64.data(), n * sizeof(double), path);
  }
  return arr;
}

void save_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  return nlohmann::json::parse(f);
}

std::uint64_t fnv1a(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace vcnode
