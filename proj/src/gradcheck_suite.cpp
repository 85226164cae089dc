#include <chrono>
#include <iomanip>

#include "icsinet/gradcheck.hpp"
#include "icsinet/pipeline.hpp"
#include "icsinet/random.hpp"

namespace icsinet {

namespace {

using TD = Tensor<double>;

constexpr double kStep = 1e-6;
constexpr double kOpTolerance = 1e-4;
constexpr double kModelTolerance = 1e-3;

TD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return TD(std::move(shape), std::move(v));
}

// Reduces any output to a scalar with fixed random weights so every output entry matters.
TD weighted_sum(const TD& y, const TD& w) { return sum(mul(y, w)); }

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : rng_(seed) {}

  Rng& rng() { return rng_; }

  template <typename F>
  void run(const std::string& name, F&& check) {
    const auto t0 = std::chrono::steady_clock::now();
    const GradCheckResult r = check();
    OpCheck c{name, r.max_rel_error, r.checked, kOpTolerance, 0.0};
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    results_.push_back(c);
  }

  // Check with respect to an input tensor of an op with a tensor output.
  void input(const std::string& name, const TD& x, const std::function<TD(const TD&)>& op,
             const std::function<bool(std::size_t)>& skip = {}) {
    TD y;
    {
      NoGradGuard g;
      y = op(x);
    }
    const TD w = random_tensor(y.shape(), rng_);
    run(name, [&] { return grad_check([&](const TD& v) { return weighted_sum(op(v), w); }, x, kStep, skip); });
  }

  // Check with respect to every coordinate of the given leaf tensors.
  void params(const std::string& name, std::vector<TD> leaves, const std::function<TD()>& loss) {
    std::vector<ParamCoordinate> coords;
    for (std::size_t t = 0; t < leaves.size(); ++t) {
      for (std::size_t i = 0; i < leaves[t].numel(); ++i) coords.push_back({t, i});
    }
    run(name, [&] { return grad_check_params(loss, leaves, coords, kStep); });
  }

  std::vector<OpCheck> take() { return std::move(results_); }

 private:
  Rng rng_;
  std::vector<OpCheck> results_;
};

ConvParams<double> random_conv(std::size_t in, std::size_t out, std::size_t k, Rng& rng) {
  auto p = ConvParams<double>::create(in, out, k);
  for (auto& v : p.weight.data()) v = uniform(rng, -0.5, 0.5);
  for (auto& v : p.bias.data()) v = uniform(rng, -0.5, 0.5);
  return p;
}

}  // namespace

std::vector<OpCheck> op_gradchecks(std::uint64_t seed) {
  Suite s(seed);
  Rng& rng = s.rng();

  {
    const TD b = random_tensor({2, 3, 4}, rng);
    s.input("add", random_tensor({2, 3, 4}, rng), [b](const TD& x) { return add(x, b); });
  }
  {
    const TD x = random_tensor({2, 3, 5, 5}, rng);
    const auto xs = x.data();
    std::vector<double> copy(xs.begin(), xs.end());
    s.input("relu", x, [](const TD& v) { return relu(v); },
            [copy](std::size_t i) { return std::abs(copy[i]) < 1e-3; });
  }
  for (std::size_t k : {std::size_t{1}, std::size_t{3}}) {
    const std::string tag = "conv2d " + std::to_string(k) + "x" + std::to_string(k);
    auto p = random_conv(3, 4, k, rng);
    s.input(tag + " input", random_tensor({2, 3, 6, 7}, rng), [p](const TD& x) { return conv2d(x, p); });
    const TD x = random_tensor({2, 3, 6, 7}, rng);
    const TD w = random_tensor({2, 4, 6, 7}, rng);
    s.params(tag + " weight/bias", {p.weight, p.bias}, [p, x, w] { return weighted_sum(conv2d(x, p), w); });
  }
  {
    auto p = BatchNormParams<double>::create(3);
    for (auto& v : p.gamma.data()) v = uniform(rng, 0.5, 1.5);
    for (auto& v : p.beta.data()) v = uniform(rng, -0.5, 0.5);
    s.input("batchnorm2d input", random_tensor({3, 3, 4, 4}, rng),
            [p](const TD& x) mutable { return batchnorm2d(x, p, Mode::Train); });
    const TD x = random_tensor({3, 3, 4, 4}, rng);
    const TD w = random_tensor({3, 3, 4, 4}, rng);
    s.params("batchnorm2d gamma/beta", {p.gamma, p.beta},
             [p, x, w]() mutable { return weighted_sum(batchnorm2d(x, p, Mode::Train), w); });
  }
  {
    const Shape shape{2, 3, 6, 8};
    const TD x = random_tensor(shape, rng);
    const auto xs = x.data();
    std::vector<double> v(xs.begin(), xs.end());
    // Skip every entry of a window whose two largest values nearly tie.
    std::vector<bool> near_tie(v.size(), false);
    for (std::size_t nc = 0; nc < 6; ++nc) {
      for (std::size_t y = 0; y < 6; y += 2) {
        for (std::size_t xx = 0; xx < 8; xx += 2) {
          std::size_t idx[4];
          for (std::size_t k = 0; k < 4; ++k) idx[k] = (nc * 6 + y + k / 2) * 8 + xx + k % 2;
          std::vector<double> w{v[idx[0]], v[idx[1]], v[idx[2]], v[idx[3]]};
          std::sort(w.begin(), w.end());
          if (w[3] - w[2] < 1e-3) {
            for (auto i : idx) near_tie[i] = true;
          }
        }
      }
    }
    s.input("maxpool2x2", x, [](const TD& t) { return maxpool2x2(t); },
            [near_tie](std::size_t i) { return bool(near_tie[i]); });
  }
  s.input("upsample_bilinear2x", random_tensor({2, 2, 3, 4}, rng), [](const TD& x) { return upsample_bilinear2x(x); });
  {
    const TD a = random_tensor({2, 2, 3, 3}, rng);
    s.input("concat_channels", random_tensor({2, 3, 3, 3}, rng),
            [a](const TD& x) { return concat_channels<double>({a, x, a}); });
  }
  s.input("spatial_softmax", random_tensor({2, 1, 4, 5}, rng, -2, 2),
          [](const TD& x) { return spatial_softmax(x).values; });
  // dsnt is linear in the heatmap, so the map need not be normalised for the check.
  s.input("dsnt", random_tensor({2, 4, 5}, rng, 0.0, 0.1), [](const TD& x) { return dsnt(Heatmap<double>{x}).xy; });
  {
    const TD target = random_tensor({2, 2, 4, 4}, rng, 0.0, 1.0);
    s.input("dice_loss", random_tensor({2, 2, 4, 4}, rng, -2, 2),
            [target](const TD& x) { return dice_loss(sigmoid(x), target, 1.0); });
  }
  {
    const TipCoords<double> target{random_tensor({3, 2}, rng, -0.9, 0.9)};
    s.input("euclidean_loss", random_tensor({3, 2}, rng, -0.9, 0.9),
            [target](const TD& x) { return euclidean_loss(TipCoords<double>{x}, target); });
  }
  {
    const TD logits = random_tensor({2, 1, 4, 5}, rng, -2, 2);
    Heatmap<double> target;
    {
      NoGradGuard g;
      target = spatial_softmax(random_tensor({2, 1, 4, 5}, rng, -2, 2));
    }
    s.input("js_loss", logits, [target](const TD& x) { return js_loss(spatial_softmax(x), target); });
  }
  return s.take();
}

OpCheck model_gradcheck(std::uint64_t seed, std::size_t count) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  ModelConfig mc;
  mc.input_size = 16;
  mc.depth = 1;
  mc.channels = {4, 8};
  mc.seed = seed;
  Model<double> model(mc);
  std::vector<TD> leaves;
  std::vector<ParamCoordinate> coords;
  for (const auto& p : model.parameters()) leaves.push_back(p.tensor);
  // Random biases and batchnorm shifts keep activations away from relu kinks at zero.
  for (auto& t : leaves) {
    if (t.rank() == 1) {
      for (auto& v : t.data()) v += uniform(rng, -0.1, 0.1);
    }
  }
  std::size_t total = 0;
  for (const auto& t : leaves) total += t.numel();
  for (std::size_t k = 0; k < count; ++k) {
    std::size_t flat = std::size_t(uniform01(rng) * double(total)) % total;
    std::size_t t = 0;
    while (flat >= leaves[t].numel()) flat -= leaves[t++].numel();
    coords.push_back({t, flat});
  }
  const TD x = random_tensor({2, 1, 16, 16}, rng, 0.0, 1.0);
  std::vector<double> m(2 * 2 * 16 * 16);
  for (auto& v : m) v = uniform01(rng) < 0.4 ? 1.0 : 0.0;
  const TD masks({2, 2, 16, 16}, m);
  const TipCoords<double> tips{random_tensor({2, 2}, rng, -0.8, 0.8)};
  const LossConfig lc;
  const auto r = grad_check_params(
      [&] { return total_loss(model.forward(x, Mode::Train), masks, tips, lc).total; }, leaves, coords, kStep);
  OpCheck c{"total_loss (depth-1 16x16 model, " + std::to_string(count) + " parameters)", r.max_rel_error, r.checked,
            kModelTolerance, 0.0};
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return c;
}

bool cmd_gradcheck(bool full, std::ostream& out) {
  auto checks = op_gradchecks();
  if (full) checks.push_back(model_gradcheck());
  bool ok = true;
  for (const auto& c : checks) {
    ok = ok && c.passed();
    out << (c.passed() ? "PASS " : "FAIL ") << std::left << std::setw(58) << c.name << " max rel err "
        << std::scientific << std::setprecision(3) << c.max_rel_error << " (tol " << c.tolerance << ", "
        << c.checked << " entries, " << std::fixed << std::setprecision(2) << c.seconds << " s)\n";
  }
  out << (ok ? "all gradient checks passed" : "gradient check FAILED") << '\n';
  return ok;
}

}  // namespace icsinet
