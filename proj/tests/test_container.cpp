#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <filesystem>

#include "vcnode/container.hpp"

using namespace vcnode;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir() {
  auto dir = fs::temp_directory_path() / ("vcnode_container_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}
}  // namespace

TEST_CASE("array round trip is bit exact") {
  const auto dir = temp_dir();
  Eigen::MatrixXf m(3, 2);
  m << 1.5f, -2.25f, 0.0f, 1e-20f, 3.14159f, -1e20f;
  save_array(dir / "m.vcno", NdArray::from_matrix(m));
  const auto back = load_array(dir / "m.vcno").as_matrix_f();
  REQUIRE(back.rows() == 3);
  REQUIRE(back.cols() == 2);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 2; ++c) CHECK(back(r, c) == m(r, c));

  Eigen::VectorXd v(4);
  v << 1.0, -0.125, 1e-300, 7.0;
  save_array(dir / "v.vcno", NdArray::from_vector(v));
  const auto vback = load_array(dir / "v.vcno").as_vector_d();
  for (int i = 0; i < 4; ++i) CHECK(vback[i] == v[i]);
  fs::remove_all(dir);
}

TEST_CASE("rank-3 stack round trip") {
  const auto dir = temp_dir();
  std::vector<Eigen::MatrixXf> stack;
  for (int i = 0; i < 3; ++i) stack.push_back(Eigen::MatrixXf::Constant(4, 2, float(i) + 0.5f));
  save_array(dir / "s.vcno", NdArray::from_stack(stack));
  const auto back = load_array(dir / "s.vcno").as_stack_f();
  REQUIRE(back.size() == 3);
  CHECK(back[2](3, 1) == 2.5f);
  fs::remove_all(dir);
}

TEST_CASE("zero-size arrays are valid") {
  const auto dir = temp_dir();
  save_array(dir / "e.vcno", NdArray::from_stack({}));
  const auto back = load_array(dir / "e.vcno");
  CHECK(back.dims == std::vector<std::uint64_t>{0, 0, 0});
  CHECK(back.f32.empty());
  fs::remove_all(dir);
}

TEST_CASE("corrupt magic is rejected") {
  const auto dir = temp_dir();
  {
    std::ofstream f(dir / "bad.vcno", std::ios::binary);
    f << "NOPE and some trailing bytes";
  }
  CHECK_THROWS(load_array(dir / "bad.vcno"));
  CHECK_THROWS(load_array(dir / "missing.vcno"));
  fs::remove_all(dir);
}

TEST_CASE("fnv1a is stable") {
  const char data[] = "vcnode";
  CHECK(fnv1a(data, 6) == fnv1a(data, 6));
  CHECK(fnv1a(data, 6) != fnv1a(data, 5));
}
