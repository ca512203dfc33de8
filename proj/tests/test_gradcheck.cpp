#include <doctest.h>

#include "proqe/gradcheck.hpp"

using namespace proqe;
using namespace proqe::ad;

TEST_CASE("gradient checker detects a wrong gradient") {
  // A primitive with a deliberately wrong backward: d(2x)/dx reported as 1.
  GradFn bad = [](Tape& t, std::span<const Var> in) {
    Tensor v = in[0].value();
    for (auto& x : v.values()) x *= 2;
    const auto i = in[0].index;
    Var y = t.record(std::move(v), {in[0]}, [i](Tape& tp, std::size_t self) {
      auto& g = tp.grad_buffer(i);
      const auto& up = tp.grad_at(self);
      for (std::size_t k = 0; k < g.numel(); ++k) g[k] += up[k];
    });
    return reduce_sum(y);
  };
  auto r = check_gradient("bad", bad, {Tensor::row({0.3, -0.7})});
  CHECK_FALSE(r.passed);
  CHECK(r.rel_error > 0.1);

  GradFn good = [](Tape&, std::span<const Var> in) { return reduce_sum(mul(in[0], in[0])); };
  auto g = check_gradient("square", good, {Tensor::row({0.3, -0.7})});
  CHECK(g.passed);
  CHECK(g.scalars == 2);
}

TEST_CASE("every primitive passes") {
  for (const auto& r : check_primitives(1)) {
    INFO(r.name << " rel_err=" << r.rel_error);
    CHECK(r.passed);
  }
}

TEST_CASE("composite losses pass for both backbones") {
  for (auto b : {Backbone::Gqe, Backbone::Q2b}) {
    auto r = check_composite(2, b);
    INFO(r.name << " rel_err=" << r.rel_error);
    CHECK(r.passed);
    CHECK(r.rel_error < kGradTolerance);
  }
}
