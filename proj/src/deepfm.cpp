#include "qrgmm/deepfm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qrgmm {

using detail::DeepFmShape;
using Eigen::Index;

void DeepFmConfig::validate() const {
    if (embed_dim < 1) throw ParameterError("embed_dim must be >= 1");
    if (hidden_sizes.empty()) throw ParameterError("hidden_sizes must be nonempty");
    for (int h : hidden_sizes)
        if (h < 1) throw ParameterError("hidden layer widths must be >= 1");
    if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be positive");
    if (epochs < 0) throw ParameterError("epochs must be >= 0");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (activation != "relu" && activation != "tanh") throw ParameterError("activation must be relu or tanh");
    if (optimizer != "adamw" && optimizer != "sgd") throw ParameterError("optimizer must be adamw or sgd");
    if (smoothing < 0.0) throw ParameterError("smoothing must be >= 0");
    if (weight_decay < 0.0) throw ParameterError("weight_decay must be >= 0");
}

double smoothed_pinball(double u, double tau, double delta) {
    if (delta <= 0.0 || std::abs(u) > delta) return pinball_loss(u, tau);
    // (tau - 1/2) u + |u|_delta / 2 with the Huber form of |u| near 0.
    return (tau - 0.5) * u + 0.5 * (u * u / (2.0 * delta) + 0.5 * delta);
}

double smoothed_pinball_grad(double u, double tau, double delta) {
    if (delta <= 0.0) return u <= 0.0 ? tau - 1.0 : tau;
    return (tau - 0.5) + 0.5 * std::clamp(u / delta, -1.0, 1.0);
}

namespace {

DeepFmShape make_shape(const FieldSchema& schema, const QuantileGrid& grid, const DeepFmConfig& cfg) {
    DeepFmShape s;
    s.m1 = grid.size();
    s.p = schema.width();
    s.k = cfg.embed_dim;
    s.F = static_cast<int>(schema.size());
    s.hidden = cfg.hidden_sizes;
    s.deep = cfg.use_deep;
    s.interactions = cfg.use_interactions;
    s.relu = cfg.activation == "relu";
    Index off = 0;
    s.off_b = off;
    off += s.m1;
    s.off_w = off;
    off += static_cast<Index>(s.m1) * s.p;
    s.off_s = off;
    off += s.m1;
    s.off_v = off;
    off += static_cast<Index>(s.k) * s.p;
    int in = s.F * s.k;
    for (int h : s.hidden) {
        s.in.push_back(in);
        s.off_lw.push_back(off);
        off += static_cast<Index>(h) * in;
        s.off_lc.push_back(off);
        off += h;
        in = h;
    }
    s.off_head = off;
    off += static_cast<Index>(s.m1) * in;
    s.size = off;
    return s;
}

using CMap = Eigen::Map<const Matrix>;
using CVec = Eigen::Map<const Vector>;
using MMap = Eigen::Map<Matrix>;
using MVec = Eigen::Map<Vector>;

struct Pass {
    Matrix yhat;                 // m1 x B, standardized units
    Matrix S;                    // k x B, sum of scaled embeddings
    Vector phi;                  // B
    Matrix E;                    // F k x B
    std::vector<Matrix> Z, H;    // pre/post activations
};

void activate(const DeepFmShape& s, const Matrix& Z, Matrix& H) {
    if (s.relu)
        H = Z.cwiseMax(0.0);
    else
        H = Z.array().tanh().matrix();
}

void run_forward(const DeepFmShape& s, const double* th, const FeatureBatch& batch, Pass& pass) {
    const Index B = batch.size();
    const CVec b(th + s.off_b, s.m1);
    const CMap W(th + s.off_w, s.m1, s.p);
    const CVec sc(th + s.off_s, s.m1);
    const CMap V(th + s.off_v, s.k, s.p);

    pass.yhat = b.replicate(1, B);
    for (Index i = 0; i < B; ++i)
        for (int f = 0; f < s.F; ++f) pass.yhat.col(i).noalias() += W.col(batch.cols(f, i)) * batch.vals(f, i);

    if (s.interactions) {
        pass.S.setZero(s.k, B);
        pass.phi.resize(B);
        for (Index i = 0; i < B; ++i) {
            double sq = 0.0;
            for (int f = 0; f < s.F; ++f) {
                const double v = batch.vals(f, i);
                const auto e = V.col(batch.cols(f, i));
                pass.S.col(i).noalias() += e * v;
                sq += e.squaredNorm() * v * v;
            }
            pass.phi[i] = 0.5 * (pass.S.col(i).squaredNorm() - sq);
        }
        pass.yhat.noalias() += sc * pass.phi.transpose();
    }

    if (s.deep) {
        pass.E.resize(static_cast<Index>(s.F) * s.k, B);
        for (Index i = 0; i < B; ++i)
            for (int f = 0; f < s.F; ++f)
                pass.E.block(static_cast<Index>(f) * s.k, i, s.k, 1) = V.col(batch.cols(f, i)) * batch.vals(f, i);
        const std::size_t L = s.hidden.size();
        pass.Z.resize(L);
        pass.H.resize(L);
        const Matrix* input = &pass.E;
        for (std::size_t l = 0; l < L; ++l) {
            const CMap A(th + s.off_lw[l], s.hidden[l], s.in[l]);
            const CVec c(th + s.off_lc[l], s.hidden[l]);
            pass.Z[l] = A * *input;
            pass.Z[l].colwise() += c;
            activate(s, pass.Z[l], pass.H[l]);
            input = &pass.H[l];
        }
        const CMap Hd(th + s.off_head, s.m1, s.hidden.back());
        pass.yhat.noalias() += Hd * pass.H.back();
    }
}

// G = d objective / d yhat (m1 x B).
void run_backward(const DeepFmShape& s, const double* th, const FeatureBatch& batch, const Pass& pass,
                  const Matrix& G, double* gr) {
    const Index B = batch.size();
    const CVec sc(th + s.off_s, s.m1);
    const CMap V(th + s.off_v, s.k, s.p);
    MVec gb(gr + s.off_b, s.m1);
    MMap gW(gr + s.off_w, s.m1, s.p);
    MVec gs(gr + s.off_s, s.m1);
    MMap gV(gr + s.off_v, s.k, s.p);

    gb += G.rowwise().sum();
    for (Index i = 0; i < B; ++i)
        for (int f = 0; f < s.F; ++f) gW.col(batch.cols(f, i)).noalias() += G.col(i) * batch.vals(f, i);

    if (s.interactions) {
        gs.noalias() += G * pass.phi;
        const Vector dphi = G.transpose() * sc;
        for (Index i = 0; i < B; ++i)
            for (int f = 0; f < s.F; ++f) {
                const int c = batch.cols(f, i);
                const double v = batch.vals(f, i);
                gV.col(c).noalias() += (dphi[i] * v) * (pass.S.col(i) - V.col(c) * v);
            }
    }

    if (s.deep) {
        const std::size_t L = s.hidden.size();
        const CMap Hd(th + s.off_head, s.m1, s.hidden.back());
        MMap gHd(gr + s.off_head, s.m1, s.hidden.back());
        gHd.noalias() += G * pass.H.back().transpose();
        Matrix dH = Hd.transpose() * G;
        Matrix dZ;
        for (std::size_t l = L; l-- > 0;) {
            if (s.relu)
                dZ = dH.cwiseProduct((pass.Z[l].array() > 0.0).cast<double>().matrix());
            else
                dZ = dH.cwiseProduct((1.0 - pass.H[l].array().square()).matrix());
            const Matrix& input = l == 0 ? pass.E : pass.H[l - 1];
            MMap gA(gr + s.off_lw[l], s.hidden[l], s.in[l]);
            MVec gc(gr + s.off_lc[l], s.hidden[l]);
            gA.noalias() += dZ * input.transpose();
            gc += dZ.rowwise().sum();
            const CMap A(th + s.off_lw[l], s.hidden[l], s.in[l]);
            dH.noalias() = A.transpose() * dZ;
        }
        // dH now holds d/dE.
        for (Index i = 0; i < B; ++i)
            for (int f = 0; f < s.F; ++f)
                gV.col(batch.cols(f, i)).noalias() +=
                    dH.block(static_cast<Index>(f) * s.k, i, s.k, 1) * batch.vals(f, i);
    }
}

double empirical_quantile(std::vector<double> v, double tau) {
    // Lower tau-quantile: smallest y with ECDF(y) >= tau.
    const auto k = static_cast<std::size_t>(std::max(0.0, std::ceil(tau * static_cast<double>(v.size())) - 1));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    return v[k];
}

}  // namespace

DeepFmQuantileModel::DeepFmQuantileModel(FieldSchema schema, QuantileGrid grid, DeepFmConfig cfg,
                                         FeatureScaling scaling)
    : schema_(std::move(schema)), grid_(grid), cfg_(std::move(cfg)), scaling_(std::move(scaling)) {
    cfg_.validate();
    const int nc = schema_.continuous_count();
    if (scaling_.cont_mean.size() == 0 && scaling_.cont_sd.size() == 0) {
        scaling_.cont_mean = Vector::Zero(nc);
        scaling_.cont_sd = Vector::Ones(nc);
    }
    if (scaling_.cont_mean.size() != nc || scaling_.cont_sd.size() != nc)
        throw ParameterError("feature scaling does not match schema");
    if (!(scaling_.cont_sd.array() > 0.0).all() || !(scaling_.y_scale > 0.0))
        throw ParameterError("scaling constants must be positive");
    shape_ = make_shape(schema_, grid_, cfg_);
    theta_ = Vector::Zero(shape_.size);
}

void DeepFmQuantileModel::set_parameters(const Vector& theta) {
    if (theta.size() != shape_.size) throw ParameterError("parameter vector has the wrong size");
    theta_ = theta;
}

std::vector<ParameterGroup> DeepFmQuantileModel::parameter_groups() const {
    const auto& s = shape_;
    std::vector<ParameterGroup> g{{"bias", s.off_b, s.m1},
                                  {"linear", s.off_w, static_cast<Index>(s.m1) * s.p},
                                  {"fm_scale", s.off_s, s.m1},
                                  {"embedding", s.off_v, static_cast<Index>(s.k) * s.p}};
    for (std::size_t l = 0; l < s.hidden.size(); ++l) {
        g.push_back({"dense" + std::to_string(l) + ".weight", s.off_lw[l], static_cast<Index>(s.hidden[l]) * s.in[l]});
        g.push_back({"dense" + std::to_string(l) + ".bias", s.off_lc[l], s.hidden[l]});
    }
    g.push_back({"head", s.off_head, s.size - s.off_head});
    return g;
}

DeepFmQuantileModel DeepFmQuantileModel::initialize(const Dataset& data, const QuantileGrid& grid,
                                                    const DeepFmConfig& cfg) {
    cfg.validate();
    if (data.size() < 1) throw DataError("training data is empty");
    FeatureScaling sc;
    const FieldSchema& schema = data.schema();
    const int nc = schema.continuous_count();
    sc.cont_mean = Vector::Zero(nc);
    sc.cont_sd = Vector::Ones(nc);
    if (cfg.standardize_features && nc > 0) {
        sc.cont_mean = data.continuous().colwise().mean().transpose();
        for (int c = 0; c < nc; ++c) {
            const double var = (data.continuous().col(c).array() - sc.cont_mean[c]).square().mean();
            sc.cont_sd[c] = var > 0.0 ? std::sqrt(var) : 1.0;
        }
    }
    const Vector& y = data.response();
    if (cfg.standardize_response) {
        sc.y_mean = y.mean();
        const double var = (y.array() - sc.y_mean).square().mean();
        sc.y_scale = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    DeepFmQuantileModel model(schema, grid, cfg, sc);
    const auto& s = model.shape_;
    Vector& th = model.theta_;

    Rng rng = make_rng(cfg.seed, 1);
    std::normal_distribution<double> N(0.0, 1.0);
    if (cfg.init_bias_from_quantiles) {
        std::vector<double> ys(static_cast<std::size_t>(y.size()));
        for (Index i = 0; i < y.size(); ++i) ys[static_cast<std::size_t>(i)] = (y[i] - sc.y_mean) / sc.y_scale;
        for (int j = 0; j < s.m1; ++j) th[s.off_b + j] = empirical_quantile(ys, grid.level(j));
    }
    th.segment(s.off_s, s.m1).setOnes();
    for (Index i = 0; i < static_cast<Index>(s.k) * s.p; ++i) th[s.off_v + i] = cfg.embed_init_sd * N(rng);
    for (std::size_t l = 0; l < s.hidden.size(); ++l) {
        const double sd = std::sqrt((s.relu ? 2.0 : 1.0) / std::max(1, s.in[l]));
        for (Index i = 0; i < static_cast<Index>(s.hidden[l]) * s.in[l]; ++i) th[s.off_lw[l] + i] = sd * N(rng);
    }
    // Head starts at zero, so the initial outputs are the bias quantiles.
    return model;
}

FeatureBatch DeepFmQuantileModel::encode(const Dataset& data, std::span<const long> rows) const {
    if (!(data.schema() == schema_)) throw SchemaError("dataset schema does not match model schema");
    FeatureBatch b;
    const auto B = static_cast<Index>(rows.size());
    b.cols.resize(shape_.F, B);
    b.vals.resize(shape_.F, B);
    for (Index i = 0; i < B; ++i) {
        const long r = rows[static_cast<std::size_t>(i)];
        int cat = 0, con = 0;
        for (int f = 0; f < shape_.F; ++f) {
            const Field& fd = schema_.field(static_cast<std::size_t>(f));
            if (fd.is_categorical()) {
                b.cols(f, i) = schema_.offset(static_cast<std::size_t>(f)) + data.levels()(r, cat++);
                b.vals(f, i) = 1.0;
            } else {
                b.cols(f, i) = schema_.offset(static_cast<std::size_t>(f));
                b.vals(f, i) = (data.continuous()(r, con) - scaling_.cont_mean[con]) / scaling_.cont_sd[con];
                ++con;
            }
        }
    }
    return b;
}

FeatureBatch DeepFmQuantileModel::encode_row(const Vector& x) const {
    if (x.size() != schema_.width()) throw SchemaError("covariate row width does not match schema");
    FeatureBatch b;
    b.cols.resize(shape_.F, 1);
    b.vals.resize(shape_.F, 1);
    int con = 0;
    for (int f = 0; f < shape_.F; ++f) {
        const Field& fd = schema_.field(static_cast<std::size_t>(f));
        const int off = schema_.offset(static_cast<std::size_t>(f));
        if (fd.is_categorical()) {
            int active = -1;
            for (int t = 0; t < fd.cardinality(); ++t) {
                const double v = x[off + t];
                if (v == 1.0 && active < 0) {
                    active = t;
                } else if (v != 0.0) {
                    throw SchemaError("field '" + fd.name + "' is not a valid one-hot block");
                }
            }
            if (active < 0) throw UnseenLevelError(fd.name, "<none>");
            b.cols(f, 0) = off + active;
            b.vals(f, 0) = 1.0;
        } else {
            b.cols(f, 0) = off;
            b.vals(f, 0) = (x[off] - scaling_.cont_mean[con]) / scaling_.cont_sd[con];
            ++con;
        }
    }
    return b;
}

Vector DeepFmQuantileModel::forward(const Vector& x) const {
    Pass pass;
    run_forward(shape_, theta_.data(), encode_row(x), pass);
    return (scaling_.y_mean + scaling_.y_scale * pass.yhat.col(0).array()).matrix();
}

Vector DeepFmQuantileModel::forward(const std::map<std::string, std::string>& assignment) const {
    return forward(schema_.encode(assignment));
}

Vector DeepFmQuantileModel::predict_quantiles(const Vector& x, std::span<const double> levels) const {
    const Vector q = quantiles(x);
    if (levels.empty()) return q;
    Vector out(static_cast<Index>(levels.size()));
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const int j = grid_.index_of(levels[i]);
        if (j < 0) throw DomainError("level " + std::to_string(levels[i]) + " is not on the quantile grid");
        out[static_cast<Index>(i)] = q[j];
    }
    return out;
}

double DeepFmQuantileModel::fm_interaction(const Vector& x) const {
    DeepFmShape s = shape_;
    s.interactions = true;
    s.deep = false;
    Pass pass;
    run_forward(s, theta_.data(), encode_row(x), pass);
    return pass.phi[0];
}

double DeepFmQuantileModel::objective(const Vector& theta, const FeatureBatch& batch, const Vector& y, double delta,
                                      Vector* grad, double* exact) const {
    if (theta.size() != shape_.size) throw ParameterError("parameter vector has the wrong size");
    const Index B = batch.size();
    if (B < 1 || y.size() != B) throw DomainError("batch and response sizes differ or are empty");
    Pass pass;
    run_forward(shape_, theta.data(), batch, pass);
    Matrix G(shape_.m1, B);
    double loss = 0.0, exact_sum = 0.0;
    const double invB = 1.0 / static_cast<double>(B);
    for (Index i = 0; i < B; ++i) {
        const double ys = (y[i] - scaling_.y_mean) / scaling_.y_scale;
        for (int j = 0; j < shape_.m1; ++j) {
            const double tau = grid_.level(j);
            const double u = ys - pass.yhat(j, i);
            loss += smoothed_pinball(u, tau, delta);
            if (exact) exact_sum += pinball_loss(u, tau);
            G(j, i) = -smoothed_pinball_grad(u, tau, delta) * invB;
        }
    }
    if (exact) *exact = exact_sum * invB;
    if (grad) {
        grad->setZero(shape_.size);
        run_backward(shape_, theta.data(), batch, pass, G, grad->data());
    }
    return loss * invB;
}

double DeepFmQuantileModel::mean_loss(const Dataset& data) const {
    const long n = data.size();
    double total = 0.0;
    constexpr long chunk = 1024;
    std::vector<long> rows;
    for (long start = 0; start < n; start += chunk) {
        const long end = std::min(n, start + chunk);
        rows.resize(static_cast<std::size_t>(end - start));
        std::iota(rows.begin(), rows.end(), start);
        const Vector y = data.response().segment(start, end - start);
        total += objective(theta_, encode(data, rows), y, 0.0, nullptr) * static_cast<double>(end - start);
    }
    return total / static_cast<double>(n) * scaling_.y_scale;
}

DeepFmQuantileModel train_deepfm(const Dataset& data, const QuantileGrid& grid, const DeepFmConfig& cfg) {
    DeepFmQuantileModel model = DeepFmQuantileModel::initialize(data, grid, cfg);
    const long n = data.size();
    DeepFmTrainReport report;
    report.initial_loss = model.mean_loss(data);

    Vector theta = model.parameters();
    const Index P = theta.size();
    Vector m1 = Vector::Zero(P), m2 = Vector::Zero(P), grad(P);
    const bool adam = cfg.optimizer == "adamw";
    const double yscale = model.scaling().y_scale;

    std::vector<long> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0L);
    Rng rng = make_rng(cfg.seed, 2);
    int diverging = 0;
    long t = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with our own uniform draws, so the order is portable.
        for (long i = n - 1; i > 0; --i) {
            const auto j = static_cast<long>(uniform01(rng) * static_cast<double>(i + 1));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        double epoch_loss = 0.0;
        for (long start = 0; start < n; start += cfg.batch_size) {
            const long end = std::min(n, start + cfg.batch_size);
            const std::span<const long> rows(order.data() + start, static_cast<std::size_t>(end - start));
            const FeatureBatch batch = model.encode(data, rows);
            Vector y(end - start);
            for (long i = start; i < end; ++i) y[i - start] = data.response()[order[static_cast<std::size_t>(i)]];
            double exact = 0.0;
            model.objective(theta, batch, y, cfg.smoothing, &grad, &exact);
            epoch_loss += exact * static_cast<double>(end - start);
            ++t;
            if (adam) {
                m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * grad;
                m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * grad.cwiseAbs2();
                const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
                const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
                theta.array() -= cfg.learning_rate * ((m1.array() / c1) / ((m2.array() / c2).sqrt() + cfg.epsilon) +
                                                      cfg.weight_decay * theta.array());
            } else {
                theta -= cfg.learning_rate * (grad + cfg.weight_decay * theta);
            }
            if (!theta.allFinite()) {
                report.status = "non-finite parameters at epoch " + std::to_string(epoch + 1) + ", step " +
                                std::to_string(t);
                report.steps = t;
                throw TrainingAborted("DeepFM training aborted: " + report.status, report);
            }
        }
        epoch_loss = epoch_loss / static_cast<double>(n) * yscale;
        if (!report.epoch_loss.empty() && epoch_loss > report.epoch_loss.back()) ++report.increases;
        report.epoch_loss.push_back(epoch_loss);
        report.steps = t;
        diverging = epoch_loss > 1e3 * report.initial_loss ? diverging + 1 : 0;
        if (diverging >= 3) {
            report.status = "diverged: loss above 1000x initial for 3 consecutive epochs";
            throw TrainingAborted("DeepFM training aborted: " + report.status, report);
        }
    }
    model.set_parameters(theta);
    model.set_train_report(report);
    return model;
}

}  // namespace qrgmm
