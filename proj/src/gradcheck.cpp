#include "proqe/gradcheck.hpp"

#include <cmath>

#include "proqe/error.hpp"
#include "proqe/rng.hpp"
#include "proqe/trainer.hpp"

namespace proqe {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

struct Accum {
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  std::size_t count = 0;
  void add(double analytic, double numeric) {
    diff2 += (analytic - numeric) * (analytic - numeric);
    a2 += analytic * analytic;
    n2 += numeric * numeric;
    ++count;
  }
  GradCheckResult finish(std::string name, double tol) const {
    GradCheckResult r;
    r.name = std::move(name);
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    r.rel_error = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
    r.scalars = count;
    r.passed = std::isfinite(r.rel_error) && r.rel_error < tol;
    return r;
  }
};

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * uniform01(rng);
  return t;
}

// Values bounded away from zero, for kinks at the origin.
Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t = random_tensor(std::move(shape), rng, 0.2, 1.0);
  for (std::size_t i = 0; i < t.numel(); ++i)
    if (uniform01(rng) < 0.5) t[i] = -t[i];
  return t;
}

// Distinct values so minimum/reduce_min never tie.
Tensor distinct(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.1 * static_cast<double>(i) - 1.0;
  for (std::size_t i = t.numel(); i > 1; --i) std::swap(t[i - 1], t[uniform_index(rng, i)]);
  return t;
}

// Projects a non-scalar output to a scalar with fixed random weights, so that
// e.g. softmax rows (which always sum to one) still carry a gradient.
Var contract(Var y, std::uint64_t seed) {
  Rng rng(seed);
  Tape& t = *y.tape;
  if (y.value().rank() == 0) return y;
  Var w = t.constant(random_tensor(y.shape(), rng));
  return ad::reduce_sum(ad::mul(y, w));
}

}  // namespace

GradCheckResult check_gradient(std::string name, const GradFn& f, std::vector<Tensor> inputs,
                               double h, double tol) {
  auto eval = [&](bool grad, std::vector<Tensor>* grads) {
    Tape tape(grad);
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    Var out = f(tape, vars);
    if (out.value().numel() != 1) throw InvalidArgument("gradient check needs a scalar output");
    const double v = out.value()[0];
    if (grad) {
      tape.backward(out);
      for (auto& x : vars) grads->push_back(tape.grad(x));
    }
    return v;
  };
  std::vector<Tensor> analytic;
  eval(true, &analytic);
  Accum acc;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double x0 = inputs[k][i];
      inputs[k][i] = x0 + h;
      const double up = eval(false, nullptr);
      inputs[k][i] = x0 - h;
      const double down = eval(false, nullptr);
      inputs[k][i] = x0;
      const double g = analytic[k].numel() ? analytic[k][i] : 0.0;
      acc.add(g, (up - down) / (2.0 * h));
    }
  return acc.finish(std::move(name), tol);
}

std::vector<GradCheckResult> check_primitives(std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0x9c}));
  std::vector<GradCheckResult> out;
  std::uint64_t salt = 0;
  // Random extents keep the suite honest about shape handling.
  auto dim = [&](std::size_t lo, std::size_t hi) { return lo + uniform_index(rng, hi - lo + 1); };
  const std::size_t n = dim(2, 4), m = dim(2, 5), k = dim(2, 4);

  auto run = [&](std::string name, std::vector<Tensor> in, std::function<Var(std::span<const Var>)> op) {
    const std::uint64_t s = derive_seed({seed, ++salt});
    out.push_back(check_gradient(
        std::move(name), [&](Tape&, std::span<const Var> v) { return contract(op(v), s); },
        std::move(in)));
  };
  auto R = [&](Shape s) { return random_tensor(std::move(s), rng); };

  run("add", {R({n, m}), R({n, m})}, [](auto v) { return ad::add(v[0], v[1]); });
  run("sub", {R({n, m}), R({n, m})}, [](auto v) { return ad::sub(v[0], v[1]); });
  run("mul", {R({n, m}), R({n, m})}, [](auto v) { return ad::mul(v[0], v[1]); });
  {
    Tensor a = distinct({n, m}, rng), b = distinct({n, m}, rng);
    for (std::size_t i = 0; i < b.numel(); ++i) b[i] += 0.05;  // no ties with a
    run("minimum", {a, b}, [](auto v) { return ad::minimum(v[0], v[1]); });
    run("maximum", {a, b}, [](auto v) { return ad::maximum(v[0], v[1]); });
  }
  run("scale", {R({n, m})}, [](auto v) { return ad::scale(v[0], -1.7); });
  run("add_scalar", {R({n, m})}, [](auto v) { return ad::mul(ad::add_scalar(v[0], 0.3), v[0]); });
  run("neg", {R({n, m})}, [](auto v) { return ad::neg(v[0]); });
  run("relu", {away_from_zero({n, m}, rng)}, [](auto v) { return ad::relu(v[0]); });
  run("sigmoid", {R({n, m})}, [](auto v) { return ad::sigmoid(v[0]); });
  run("log_sigmoid", {random_tensor({n, m}, rng, -4, 4)}, [](auto v) { return ad::log_sigmoid(v[0]); });
  run("softplus", {random_tensor({n, m}, rng, -4, 4)}, [](auto v) { return ad::softplus(v[0]); });
  run("abs", {away_from_zero({n, m}, rng)}, [](auto v) { return ad::abs(v[0]); });
  run("add_row", {R({n, m}), R({1, m})}, [](auto v) { return ad::add_row(v[0], v[1]); });
  run("mul_row", {R({n, m}), R({1, m})}, [](auto v) { return ad::mul_row(v[0], v[1]); });
  run("matmul", {R({n, k}), R({k, m})}, [](auto v) { return ad::matmul(v[0], v[1]); });
  run("transpose", {R({n, m})}, [](auto v) { return ad::transpose(v[0]); });
  run("reshape", {R({n, m})}, [n, m](auto v) { return ad::reshape(v[0], Shape{m, n}); });
  run("concat_axis0", {R({n, m}), R({k, m})}, [](auto v) { return ad::concat(v, 0); });
  run("concat_axis1", {R({n, m}), R({n, k})}, [](auto v) { return ad::concat(v, 1); });
  run("slice_vector", {R({m + 2})}, [m](auto v) { return ad::slice(v[0], 0, 1, m + 1); });
  run("slice_rows", {R({n + 2, m})}, [n](auto v) { return ad::slice(v[0], 0, 1, n + 1); });
  run("slice_cols", {R({n, m + 2})}, [m](auto v) { return ad::slice(v[0], 1, 2, m + 2); });
  {
    std::vector<std::uint32_t> ids{1, 0, 1, static_cast<std::uint32_t>(n - 1)};
    run("gather_rows", {R({n, m})}, [ids](auto v) { return ad::gather_rows(v[0], ids); });
  }
  run("reduce_sum", {R({n, m})}, [](auto v) { return ad::mul(ad::reduce_sum(v[0]), ad::reduce_sum(v[0])); });
  run("reduce_mean", {R({n, m})}, [](auto v) { return ad::mul(ad::reduce_mean(v[0]), ad::reduce_sum(v[0])); });
  run("reduce_sum_axis0", {R({n, m})}, [](auto v) { return ad::reduce_sum(v[0], 0); });
  run("reduce_sum_axis1", {R({n, m})}, [](auto v) { return ad::reduce_sum(v[0], 1); });
  run("reduce_mean_axis0", {R({n, m})}, [](auto v) { return ad::reduce_mean(v[0], 0); });
  run("reduce_mean_axis1", {R({n, m})}, [](auto v) { return ad::reduce_mean(v[0], 1); });
  run("reduce_min_axis0", {distinct({n, m}, rng)}, [](auto v) { return ad::reduce_min(v[0], 0); });
  run("reduce_min_axis1", {distinct({n, m}, rng)}, [](auto v) { return ad::reduce_min(v[0], 1); });
  run("dot", {R({n, m}), R({n, m})}, [](auto v) { return ad::dot(v[0], v[1]); });
  {
    Tensor a = R({n, m}), b = away_from_zero({n, m}, rng);
    for (std::size_t i = 0; i < b.numel(); ++i) b[i] += a[i];  // |a - b| >= 0.2
    run("l1_distance", {a, b}, [](auto v) { return ad::l1_distance(v[0], v[1]); });
  }
  run("softmax_vector", {R({m})}, [](auto v) { return ad::softmax(v[0], 0); });
  run("softmax_axis0", {R({n, m})}, [](auto v) { return ad::softmax(v[0], 0); });
  run("softmax_axis1", {R({n, m})}, [](auto v) { return ad::softmax(v[0], 1); });
  run("layer_norm", {R({n, m + 2})}, [](auto v) { return ad::layer_norm(v[0]); });
  return out;
}

GradCheckResult check_composite(std::uint64_t seed, Backbone backbone) {
  // Six entities on a ring plus chords, so every entity has at least two
  // neighbors; entity 5 is unseen and anchors the second branch.
  Vocab ents = Vocab::numbered("e", 6), rels = Vocab::numbered("r", 3);
  std::vector<Triple> triples{{0, 0, 1}, {1, 0, 2}, {2, 1, 3}, {3, 1, 4}, {4, 2, 5},
                              {5, 2, 0}, {0, 1, 3}, {1, 2, 4}, {2, 0, 5}, {5, 1, 1}};
  KnowledgeGraph kg(std::move(ents), std::move(rels), std::move(triples));

  ModelConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.max_len = 16;
  cfg.neighbor_cap = 2;
  cfg.backbone = backbone;
  cfg.seed = seed;
  cfg.init_range = 0.5;
  Model model(cfg, kg.num_entities(), kg.num_relations(), {0, 1, 2, 3, 4});

  const std::vector<EntityId> anchors{0, 5};
  const std::vector<RelationId> relations{0, 2};
  const QueryGraph q = instantiate(Structure::I2, anchors, relations);
  const EntityId positive = 2;
  const std::vector<EntityId> negatives{1, 3, 4};
  const std::uint64_t ctx_seed = derive_seed({seed, 0xc0});

  double gamma = 0.0;
  auto loss = [&](Tape& tape) {
    Forward fw(model, tape);
    std::vector<EntityId> need(anchors);
    need.push_back(positive);
    need.insert(need.end(), negatives.begin(), negatives.end());
    fw.prepare(kg, need, ctx_seed);
    auto pass = fw.run_query(q);
    std::vector<Var> rows{fw.represent(positive, pass.answer_prompt)};
    for (auto e : negatives) rows.push_back(fw.represent(e, pass.answer_prompt));
    Var D = fw.distances(pass.embedding, ad::concat(rows, 0));
    if (gamma == 0.0) gamma = ad::reduce_mean(D).value().item();  // keeps the sigmoids unsaturated
    return query_loss(ad::slice(D, 0, 0, 1), ad::slice(D, 0, 1, rows.size()), gamma);
  };

  Tape tape;
  Var l = loss(tape);
  tape.backward(l);
  Accum acc;
  for (auto& p : model.params()) {
    const Tensor* g = tape.grad_of(p);
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double x0 = p.value[i];
      p.value[i] = x0 + kGradStep;
      Tape t1(false);
      const double up = loss(t1).value().item();
      p.value[i] = x0 - kGradStep;
      Tape t2(false);
      const double down = loss(t2).value().item();
      p.value[i] = x0;
      acc.add(g && g->numel() ? (*g)[i] : 0.0, (up - down) / (2.0 * kGradStep));
    }
  }
  return acc.finish(std::string("composite_") + std::string(to_string(backbone)), kGradTolerance);
}

}  // namespace proqe
