#include "charforge/errors.hpp"
#include "charforge/flowgen.hpp"
#include "charforge/json_util.hpp"

#include <cmath>
#include <numbers>

namespace charforge {

namespace {

Eigen::MatrixXd silu(const Eigen::MatrixXd& z) {
    return z.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
}

Eigen::MatrixXd silu_grad(const Eigen::MatrixXd& z) {
    return z.unaryExpr([](double v) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
    });
}

constexpr const char* kCheckpointFormat = "charforge-checkpoint";
constexpr int kCheckpointVersion = 1;

}  // namespace

Eigen::VectorXd time_embedding(double t, int time_dim) {
    Eigen::VectorXd e(time_dim);
    for (int k = 0; k < time_dim / 2; ++k) {
        const double w = std::numbers::pi * std::ldexp(1.0, k);
        e[2 * k] = std::sin(w * t);
        e[2 * k + 1] = std::cos(w * t);
    }
    if (time_dim % 2 == 1) {
        e[time_dim - 1] = t;
    }
    return e;
}

CondToken CondToken::from(const EmbedVector& e) {
    CondToken c;
    c.embedding = Eigen::Map<const Eigen::VectorXd>(e.values.data(), static_cast<Eigen::Index>(e.values.size()));
    return c;
}

CondToken CondToken::none(int cond_dim) {
    CondToken c;
    c.embedding = Eigen::VectorXd::Zero(cond_dim);
    c.uncond = true;
    return c;
}

VelocityField::Layout VelocityField::layout(const NetShape& s) {
    Layout l{};
    Eigen::Index off = 0;
    l.w1 = off;
    off += Eigen::Index{s.hidden1} * s.input_dim();
    l.b1 = off;
    off += s.hidden1;
    l.w2 = off;
    off += Eigen::Index{s.hidden2} * s.hidden1;
    l.b2 = off;
    off += s.hidden2;
    l.w3 = off;
    off += Eigen::Index{s.data_dim} * s.hidden2;
    l.b3 = off;
    off += s.data_dim;
    l.skip = off;
    off += 1 + s.time_dim;
    l.total = off;
    return l;
}

Eigen::Index VelocityField::param_count(const NetShape& s) { return layout(s).total; }

VelocityField::VelocityField(NetShape shape, uint64_t init_seed)
    : shape_(shape), layout_(layout(shape)), params_(Eigen::VectorXd::Zero(layout_.total)) {
    Rng rng(derive_seed(init_seed, 0xf10e));
    auto fill = [&](Eigen::Index off, Eigen::Index n, double scale) {
        for (Eigen::Index i = 0; i < n; ++i) {
            params_[off + i] = rng.normal() * scale;
        }
    };
    fill(layout_.w1, Eigen::Index{shape.hidden1} * shape.input_dim(), 1.0 / std::sqrt(shape.input_dim()));
    fill(layout_.w2, Eigen::Index{shape.hidden2} * shape.hidden1, 1.0 / std::sqrt(shape.hidden1));
    // small output layer: the untrained field starts close to zero velocity
    fill(layout_.w3, Eigen::Index{shape.data_dim} * shape.hidden2, 0.1 / std::sqrt(shape.hidden2));
}

VelocityField::VelocityField(NetShape shape, Eigen::VectorXd params)
    : shape_(shape), layout_(layout(shape)), params_(std::move(params)) {
    if (params_.size() != layout_.total) {
        throw InvalidArgument("parameter count " + std::to_string(params_.size()) + " does not match shape (" +
                              std::to_string(layout_.total) + ")");
    }
    if (!params_.allFinite()) {
        throw NumericalDivergence("non-finite velocity parameters");
    }
}

Eigen::MatrixXd VelocityField::assemble_input(const VelocityBatch& batch, Eigen::MatrixXd& temb) const {
    const int b = batch.size();
    if (batch.x.rows() != shape_.data_dim || batch.x.cols() != b || batch.cond.rows() != shape_.cond_dim ||
        batch.cond.cols() != b || static_cast<int>(batch.uncond.size()) != b) {
        throw InvalidArgument("velocity batch has inconsistent dimensions");
    }
    Eigen::MatrixXd in(shape_.input_dim(), b);
    temb.resize(shape_.time_dim, b);
    for (int j = 0; j < b; ++j) {
        temb.col(j) = time_embedding(batch.t[j], shape_.time_dim);
    }
    in.topRows(shape_.data_dim) = batch.x;
    in.middleRows(shape_.data_dim, shape_.time_dim) = temb;
    for (int j = 0; j < b; ++j) {
        if (batch.uncond[static_cast<size_t>(j)]) {
            in.block(shape_.data_dim + shape_.time_dim, j, shape_.cond_dim, 1).setZero();
            in(shape_.input_dim() - 1, j) = 1.0;
        } else {
            in.block(shape_.data_dim + shape_.time_dim, j, shape_.cond_dim, 1) = batch.cond.col(j);
            in(shape_.input_dim() - 1, j) = 0.0;
        }
    }
    return in;
}

Eigen::MatrixXd VelocityField::forward(const VelocityBatch& batch, Tape& tape) const {
    const auto& s = shape_;
    const auto& l = layout_;
    Eigen::Map<const Eigen::MatrixXd> w1(params_.data() + l.w1, s.hidden1, s.input_dim());
    Eigen::Map<const Eigen::VectorXd> b1(params_.data() + l.b1, s.hidden1);
    Eigen::Map<const Eigen::MatrixXd> w2(params_.data() + l.w2, s.hidden2, s.hidden1);
    Eigen::Map<const Eigen::VectorXd> b2(params_.data() + l.b2, s.hidden2);
    Eigen::Map<const Eigen::MatrixXd> w3(params_.data() + l.w3, s.data_dim, s.hidden2);
    Eigen::Map<const Eigen::VectorXd> b3(params_.data() + l.b3, s.data_dim);
    Eigen::Map<const Eigen::VectorXd> skip(params_.data() + l.skip, 1 + s.time_dim);

    tape.input = assemble_input(batch, tape.temb);
    tape.z1 = (w1 * tape.input).colwise() + b1;
    tape.h1 = silu(tape.z1);
    tape.z2 = (w2 * tape.h1).colwise() + b2;
    tape.h2 = silu(tape.z2);
    Eigen::MatrixXd out = (w3 * tape.h2).colwise() + b3;
    for (int j = 0; j < batch.size(); ++j) {
        const double gate = skip[0] + skip.tail(s.time_dim).dot(tape.temb.col(j));
        out.col(j) += gate * batch.x.col(j);
    }
    return out;
}

Eigen::MatrixXd VelocityField::velocity(const VelocityBatch& batch) const {
    Tape tape;
    return forward(batch, tape);
}

void VelocityField::backward(const Tape& tape, const Eigen::MatrixXd& upstream, Eigen::VectorXd& grad) const {
    const auto& s = shape_;
    const auto& l = layout_;
    if (grad.size() != l.total) {
        throw InvalidArgument("gradient buffer has the wrong size");
    }
    Eigen::Map<const Eigen::MatrixXd> w2(params_.data() + l.w2, s.hidden2, s.hidden1);
    Eigen::Map<const Eigen::MatrixXd> w3(params_.data() + l.w3, s.data_dim, s.hidden2);

    Eigen::Map<Eigen::MatrixXd> gw1(grad.data() + l.w1, s.hidden1, s.input_dim());
    Eigen::Map<Eigen::VectorXd> gb1(grad.data() + l.b1, s.hidden1);
    Eigen::Map<Eigen::MatrixXd> gw2(grad.data() + l.w2, s.hidden2, s.hidden1);
    Eigen::Map<Eigen::VectorXd> gb2(grad.data() + l.b2, s.hidden2);
    Eigen::Map<Eigen::MatrixXd> gw3(grad.data() + l.w3, s.data_dim, s.hidden2);
    Eigen::Map<Eigen::VectorXd> gb3(grad.data() + l.b3, s.data_dim);
    Eigen::Map<Eigen::VectorXd> gskip(grad.data() + l.skip, 1 + s.time_dim);

    const auto x = tape.input.topRows(s.data_dim);
    for (Eigen::Index j = 0; j < upstream.cols(); ++j) {
        const double gx = upstream.col(j).dot(x.col(j));
        gskip[0] += gx;
        gskip.tail(s.time_dim) += gx * tape.temb.col(j);
    }
    gw3.noalias() += upstream * tape.h2.transpose();
    gb3 += upstream.rowwise().sum();
    const Eigen::MatrixXd dz2 = (w3.transpose() * upstream).cwiseProduct(silu_grad(tape.z2));
    gw2.noalias() += dz2 * tape.h1.transpose();
    gb2 += dz2.rowwise().sum();
    const Eigen::MatrixXd dz1 = (w2.transpose() * dz2).cwiseProduct(silu_grad(tape.z1));
    gw1.noalias() += dz1 * tape.input.transpose();
    gb1 += dz1.rowwise().sum();
}

Eigen::MatrixXd guide(const Eigen::MatrixXd& v_uncond, const Eigen::MatrixXd& v_cond, double scale) {
    return (1.0 - scale) * v_uncond + scale * v_cond;
}

GuidanceBatch make_guidance_batch(const NetShape& s, const Eigen::MatrixXd& x, double t, const CondToken& cond,
                                  double guidance_scale) {
    GuidanceBatch g;
    g.width = x.cols();
    g.need_uncond = guidance_scale != 1.0 && !cond.uncond;
    g.need_cond = guidance_scale != 0.0 || cond.uncond;
    const Eigen::Index b = g.width;
    const Eigen::Index cols = (g.need_uncond ? b : 0) + (g.need_cond ? b : 0);
    VelocityBatch& batch = g.batch;
    batch.x.resize(s.data_dim, cols);
    batch.t = Eigen::VectorXd::Constant(cols, t);
    batch.cond.resize(s.cond_dim, cols);
    batch.uncond.assign(static_cast<size_t>(cols), 0);
    Eigen::Index off = 0;
    if (g.need_cond) {
        batch.x.middleCols(off, b) = x;
        for (Eigen::Index j = 0; j < b; ++j) {
            batch.cond.col(off + j) = cond.embedding;
            batch.uncond[static_cast<size_t>(off + j)] = cond.uncond ? 1 : 0;
        }
        off += b;
    }
    if (g.need_uncond) {
        batch.x.middleCols(off, b) = x;
        batch.cond.middleCols(off, b).setZero();
        for (Eigen::Index j = 0; j < b; ++j) {
            batch.uncond[static_cast<size_t>(off + j)] = 1;
        }
    }
    return g;
}

Eigen::MatrixXd combine_guidance(const GuidanceBatch& g, const Eigen::MatrixXd& v, double guidance_scale) {
    if (!g.need_uncond || !g.need_cond) {
        return v;  // s = 1, s = 0, or the condition is itself the sentinel
    }
    return guide(v.middleCols(g.width, g.width), v.leftCols(g.width), guidance_scale);
}

Eigen::MatrixXd guidance_upstream(const GuidanceBatch& g, const Eigen::MatrixXd& upstream, double guidance_scale) {
    if (!g.need_uncond || !g.need_cond) {
        return upstream;
    }
    Eigen::MatrixXd out(upstream.rows(), 2 * g.width);
    out.leftCols(g.width) = guidance_scale * upstream;
    out.rightCols(g.width) = (1.0 - guidance_scale) * upstream;
    return out;
}

Eigen::MatrixXd guided_velocity(const VelocityModel& model, const Eigen::MatrixXd& x, double t,
                                const CondToken& cond, double guidance_scale) {
    const GuidanceBatch g = make_guidance_batch(model.shape(), x, t, cond, guidance_scale);
    return combine_guidance(g, model.velocity(g.batch), guidance_scale);
}

void SamplerConfig::validate() const {
    if (train_steps < 2) {
        throw InvalidArgument("sampler.train_steps must be >= 2");
    }
    if (eval_steps < 2) {
        throw InvalidArgument("sampler.eval_steps must be >= 2");
    }
    if (window_size < 1 || window_size > train_steps / 2) {
        throw InvalidArgument("sampler.window_size must lie in [1, floor(train_steps/2)]");
    }
    if (!(noise_level >= 0.0)) {
        throw InvalidArgument("sampler.noise_level must be >= 0");
    }
    if (!std::isfinite(guidance_scale)) {
        throw InvalidArgument("sampler.guidance_scale must be finite");
    }
}

nlohmann::json to_json(const SamplerConfig& c) {
    return {{"train_steps", c.train_steps}, {"eval_steps", c.eval_steps}, {"guidance_scale", c.guidance_scale},
            {"noise_level", c.noise_level}, {"window_size", c.window_size}, {"seed", c.seed}};
}

SamplerConfig sampler_from_json(const nlohmann::json& j, const std::string& path) {
    SamplerConfig c;
    if (j.is_null()) {
        return c;
    }
    if (!j.is_object()) {
        throw SchemaError(path, "expected an object");
    }
    JsonReader r(j, path);
    c.train_steps = static_cast<int>(r.integer_or("train_steps", c.train_steps));
    c.eval_steps = static_cast<int>(r.integer_or("eval_steps", c.eval_steps));
    c.guidance_scale = r.number_or("guidance_scale", c.guidance_scale);
    c.noise_level = r.number_or("noise_level", c.noise_level);
    c.window_size = static_cast<int>(r.integer_or("window_size", c.window_size));
    c.seed = r.unsigned_or("seed", c.seed);
    try {
        c.validate();
    } catch (const InvalidArgument& e) {
        throw SchemaError(path, e.what());
    }
    return c;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file) {
    nlohmann::json j;
    j["format"] = kCheckpointFormat;
    j["version"] = kCheckpointVersion;
    j["shape"] = {{"data_dim", ckpt.shape.data_dim},
                  {"time_dim", ckpt.shape.time_dim},
                  {"cond_dim", ckpt.shape.cond_dim},
                  {"hidden1", ckpt.shape.hidden1},
                  {"hidden2", ckpt.shape.hidden2}};
    j["params"] = std::vector<double>(ckpt.params.data(), ckpt.params.data() + ckpt.params.size());
    j["sampler"] = to_json(ckpt.sampler);
    j["lm"] = ckpt.lm;
    j["meta"] = ckpt.meta;
    write_json_file(j, file, -1);
}

Checkpoint read_checkpoint(const std::filesystem::path& file) {
    const nlohmann::json j = read_json_file(file);
    JsonReader r(j);
    if (r.str("format") != kCheckpointFormat) {
        throw SchemaError("format", "not a charforge checkpoint");
    }
    if (r.integer("version") != kCheckpointVersion) {
        throw SchemaError("version", "unsupported checkpoint version");
    }
    Checkpoint c;
    const JsonReader s = r.object("shape");
    c.shape.data_dim = static_cast<int>(s.integer("data_dim"));
    c.shape.time_dim = static_cast<int>(s.integer("time_dim"));
    c.shape.cond_dim = static_cast<int>(s.integer("cond_dim"));
    c.shape.hidden1 = static_cast<int>(s.integer("hidden1"));
    c.shape.hidden2 = static_cast<int>(s.integer("hidden2"));
    const auto& p = r.raw("params");
    if (!p.is_array()) {
        throw SchemaError("params", "expected an array");
    }
    if (static_cast<Eigen::Index>(p.size()) != VelocityField::param_count(c.shape)) {
        throw SchemaError("params", "length does not match shape");
    }
    c.params.resize(static_cast<Eigen::Index>(p.size()));
    for (size_t i = 0; i < p.size(); ++i) {
        if (!p[i].is_number()) {
            throw SchemaError("params[" + std::to_string(i) + "]", "expected a number");
        }
        c.params[static_cast<Eigen::Index>(i)] = p[i].get<double>();
    }
    c.sampler = sampler_from_json(r.raw("sampler"));
    c.lm = r.has("lm") ? r.raw("lm") : nlohmann::json();
    c.meta = r.has("meta") ? r.raw("meta") : nlohmann::json();
    return c;
}

}  // namespace charforge
