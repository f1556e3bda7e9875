#include "cbv/diffusion/scorenet.hpp"

#include <algorithm>
#include <cmath>

#include "cbv/numcore/optim.hpp"
#include "cbv/numcore/rng.hpp"

namespace cbv::diffusion {

using namespace cbv::numcore;
using encoders::Dataset;
using encoders::is_holdout;

namespace {

Tensor he_init(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    rng.fill_normal(t, std::sqrt(2.0 / static_cast<double>(fan_in)));
    return t;
}

void check_alpha_bar(float ab) {
    if (!(ab > 0.0f) || !(ab < 1.0f)) throw BadRange("alpha_bar must lie in (0, 1)");
}

}  // namespace

Tensor time_embedding(std::size_t t, std::size_t dim) {
    if (dim < 2 || dim % 2 != 0) throw BadConfig("time embedding dimension must be even and >= 2");
    const std::size_t half = dim / 2;
    Tensor emb({dim});
    for (std::size_t i = 0; i < half; ++i) {
        const double denom = half > 1 ? static_cast<double>(half - 1) : 1.0;
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / denom);
        const double arg = static_cast<double>(t) * freq;
        emb[2 * i] = static_cast<float>(std::sin(arg));
        emb[2 * i + 1] = static_cast<float>(std::cos(arg));
    }
    return emb;
}

ScoreNet::ScoreNet(ScoreNetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.in_channels == 0 || cfg_.image_size == 0) throw BadConfig("ScoreNet: empty image shape");
    if (cfg_.hidden == 0) throw BadConfig("ScoreNet: hidden width must be positive");
    if (cfg_.temb_dim < 2 || cfg_.temb_dim % 2 != 0) {
        throw BadConfig("ScoreNet: temb_dim must be even and >= 2");
    }
    Rng r0 = Rng::derive(seed, 0);
    Rng r1 = Rng::derive(seed, 1);
    Rng r2 = Rng::derive(seed, 2);
    Rng r3 = Rng::derive(seed, 3);
    params_.emplace("score.conv1.w", he_init({cfg_.hidden, cfg_.in_channels, 3, 3}, cfg_.in_channels * 9, r0));
    params_.emplace("score.conv1.b", Tensor({cfg_.hidden}));
    // The step conditioning starts an order of magnitude below the conv
    // activations; a full-scale draw can push every channel of a narrow
    // first stage under the rectifier and freeze the net at init.
    Tensor tw({cfg_.hidden, cfg_.temb_dim});
    r1.fill_normal(tw, 0.1 * std::sqrt(2.0 / static_cast<double>(cfg_.temb_dim)));
    params_.emplace("score.time.w", std::move(tw));
    params_.emplace("score.time.b", Tensor({cfg_.hidden}));
    params_.emplace("score.conv2.w", he_init({cfg_.hidden, cfg_.hidden, 3, 3}, cfg_.hidden * 9, r2));
    params_.emplace("score.conv2.b", Tensor({cfg_.hidden}));
    params_.emplace("score.conv3.w", he_init({cfg_.in_channels, cfg_.hidden, 3, 3}, cfg_.hidden * 9, r3));
    params_.emplace("score.conv3.b", Tensor({cfg_.in_channels}));
}

NodeId ScoreNet::build(Program& p, NodeId x, std::size_t t) const {
    auto P = [&](const char* name) { return p.parameter(name, params_.at(name)); };
    NodeId temb = p.constant(time_embedding(t, cfg_.temb_dim));
    NodeId tbias = p.add(p.matmul(P("score.time.w"), temb), P("score.time.b"));
    NodeId h = p.conv2d(x, P("score.conv1.w"));
    h = p.relu(p.channel_bias(p.channel_bias(h, P("score.conv1.b")), tbias));
    h = p.relu(p.channel_bias(p.conv2d(h, P("score.conv2.w")), P("score.conv2.b")));
    return p.channel_bias(p.conv2d(h, P("score.conv3.w")), P("score.conv3.b"));
}

Tensor ScoreNet::predict(const Tensor& x_t, std::size_t t) const {
    Program p;
    NodeId x = p.input("x", {cfg_.in_channels, cfg_.image_size, cfg_.image_size});
    NodeId eps = build(p, x, t);
    p.set_input(x, x_t);
    return p.value(eps);
}

void ScoreNet::save(const std::string& path) const {
    ParamMap m = params_;
    Tensor meta({5}, {static_cast<float>(cfg_.in_channels), static_cast<float>(cfg_.image_size),
                      static_cast<float>(cfg_.hidden), static_cast<float>(cfg_.temb_dim),
                      trained_ ? 1.0f : 0.0f});
    m.emplace("__meta__", meta);
    save_checkpoint(path, m);
}

ScoreNet ScoreNet::load(const std::string& path) {
    ParamMap m = load_checkpoint(path);
    auto it = m.find("__meta__");
    if (it == m.end() || it->second.numel() != 5) {
        throw CheckpointError("not a score net checkpoint: " + path);
    }
    const Tensor& meta = it->second;
    ScoreNet n;
    n.cfg_.in_channels = static_cast<std::size_t>(meta[0]);
    n.cfg_.image_size = static_cast<std::size_t>(meta[1]);
    n.cfg_.hidden = static_cast<std::size_t>(meta[2]);
    n.cfg_.temb_dim = static_cast<std::size_t>(meta[3]);
    n.trained_ = meta[4] != 0.0f;
    m.erase(it);
    n.params_ = std::move(m);
    return n;
}

namespace {

struct Probe {
    std::size_t index;
    std::size_t t;
    Tensor z;
};

double probe_loss(const ScoreNet& net, const Dataset& data, const NoiseSchedule& sched,
                  const std::vector<Probe>& probes) {
    double total = 0.0;
    for (const Probe& pr : probes) {
        const Tensor& x0 = data.samples[pr.index].image;
        Tensor x_t = forward_diffuse(x0, pr.t, sched, pr.z);
        Tensor eps = net.predict(x_t, pr.t);
        double mse = 0.0;
        for (std::size_t i = 0; i < eps.numel(); ++i) {
            const double d = static_cast<double>(eps[i]) - static_cast<double>(pr.z[i]);
            mse += d * d;
        }
        total += mse / static_cast<double>(eps.numel());
    }
    return total / static_cast<double>(probes.size());
}

}  // namespace

DiffusionTrainReport train_score(ScoreNet& net, const Dataset& data, const NoiseSchedule& sched,
                                 const DiffusionTrainConfig& cfg) {
    if (data.samples.empty()) throw EmptyInput("train_score: empty dataset");
    const ScoreNetConfig& nc = net.config();
    const Shape want{nc.in_channels, nc.image_size, nc.image_size};
    for (const auto& s : data.samples) {
        if (!shape_eq(s.image.shape(), want)) {
            throw ShapeMismatch("sample image shape " + shape_str(s.image.shape()) + ", want " +
                                shape_str(want));
        }
    }
    if (cfg.batch == 0) throw BadConfig("batch size must be positive");
    if (!(cfg.lr > 0.0f)) throw BadConfig("learning rate must be positive");

    std::vector<std::size_t> pool, held;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        (is_holdout(i) ? held : pool).push_back(i);
    }
    if (pool.empty()) pool = held;
    if (held.empty()) held = pool;

    std::vector<Probe> probes;
    Rng probe_rng = Rng::derive(cfg.seed, 500);
    for (std::size_t idx : held) {
        Probe pr;
        pr.index = idx;
        pr.t = 1 + probe_rng.uniform_index(sched.T);
        pr.z = probe_rng.normal_tensor(want);
        probes.push_back(std::move(pr));
    }

    DiffusionTrainReport rep;
    rep.baseline_loss = static_cast<float>(probe_loss(net, data, sched, probes));
    if (cfg.epochs == 0) {
        rep.holdout_loss = rep.baseline_loss;
        return rep;
    }

    Adam opt(cfg.lr);
    const std::size_t numel = shape_numel(want);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order = Rng::derive(cfg.seed, 3000 + epoch);
        Rng noise = Rng::derive(cfg.seed, 4000 + epoch);
        std::vector<std::size_t> perm = order.permutation(pool.size());
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < perm.size(); start += cfg.batch) {
            const std::size_t end = std::min(start + cfg.batch, perm.size());
            Program p;
            NodeId loss{};
            bool first = true;
            for (std::size_t i = start; i < end; ++i) {
                const Tensor& x0 = data.samples[pool[perm[i]]].image;
                const std::size_t t = 1 + noise.uniform_index(sched.T);
                Tensor z = noise.normal_tensor(want);
                Tensor x_t = forward_diffuse(x0, t, sched, z);
                NodeId d = p.sub(net.build(p, p.constant(x_t), t), p.constant(z));
                NodeId sq = p.inner(d, d);
                loss = first ? sq : p.add(loss, sq);
                first = false;
            }
            loss = p.scale(loss, 1.0f / static_cast<float>((end - start) * numel));
            auto grads = p.parameter_gradients(loss);
            const float lval = p.scalar_value(loss);
            if (!std::isfinite(lval)) throw NonConvergence("noise-prediction loss diverged");
            opt.step(net.params(), grads);
            epoch_loss += lval;
            ++batches;
        }
        rep.loss_history.push_back(batches ? static_cast<float>(epoch_loss / batches) : 0.0f);
        ++rep.epochs_run;
    }

    net.set_trained(true);
    rep.holdout_loss = static_cast<float>(probe_loss(net, data, sched, probes));
    return rep;
}

Tensor denoise_from_eps(const Tensor& x_t, const Tensor& eps, float alpha_bar_t) {
    check_alpha_bar(alpha_bar_t);
    if (!x_t.same_shape(eps)) {
        throw ShapeMismatch("denoise_from_eps: x " + shape_str(x_t.shape()) + " vs eps " +
                            shape_str(eps.shape()));
    }
    const double ab = alpha_bar_t;
    const float b = static_cast<float>(std::sqrt(1.0 - ab));
    const float inv_a = static_cast<float>(1.0 / std::sqrt(ab));
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (x_t[i] - b * eps[i]) * inv_a;
    return out;
}

Tensor denoise_estimate(const ScoreNet& net, const Tensor& x_t, std::size_t t,
                        const NoiseSchedule& sched) {
    return denoise_from_eps(x_t, net.predict(x_t, t), sched.alpha_bar_at(t));
}

Tensor score_from_eps(const Tensor& eps, float alpha_bar_t) {
    check_alpha_bar(alpha_bar_t);
    const float c = static_cast<float>(-1.0 / std::sqrt(1.0 - static_cast<double>(alpha_bar_t)));
    Tensor out(eps.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = c * eps[i];
    return out;
}

Tensor base_score(const ScoreNet& net, const Tensor& x_t, std::size_t t, const NoiseSchedule& sched) {
    return score_from_eps(net.predict(x_t, t), sched.alpha_bar_at(t));
}

}  // namespace cbv::diffusion
