// Scripted single-round reference for the adversarial method in SGD mode with
// full-batch updates. Written against plain arrays only; nothing here calls
// into the library's numerics, so agreement is evidence of correctness.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace straight_line {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major, one Vec per sample

// Flat layout: for each layer, weights [in][out] row-major, then bias[out].
struct Net {
    std::vector<std::size_t> widths;
    Vec p;

    std::size_t w_at(std::size_t layer, std::size_t i, std::size_t o) const {
        std::size_t off = 0;
        for (std::size_t l = 0; l < layer; ++l) off += widths[l] * widths[l + 1] + widths[l + 1];
        return off + i * widths[layer + 1] + o;
    }
    std::size_t b_at(std::size_t layer, std::size_t o) const {
        std::size_t off = 0;
        for (std::size_t l = 0; l < layer; ++l) off += widths[l] * widths[l + 1] + widths[l + 1];
        return off + widths[layer] * widths[layer + 1] + o;
    }
};

// acts[0] = input; acts[l+1] = layer l output (after ReLU except the last).
// pre[l] = layer l pre-activation.
struct Trace {
    std::vector<Mat> acts;
    std::vector<Mat> pre;
};

inline Mat forward(const Net& n, const Mat& x, Trace* tr = nullptr) {
    const std::size_t layers = n.widths.size() - 1;
    Mat a = x;
    if (tr) {
        tr->acts.assign(1, x);
        tr->pre.clear();
    }
    for (std::size_t l = 0; l < layers; ++l) {
        Mat z(a.size(), Vec(n.widths[l + 1], 0.0));
        for (std::size_t s = 0; s < a.size(); ++s) {
            for (std::size_t o = 0; o < n.widths[l + 1]; ++o) {
                double v = n.p[n.b_at(l, o)];
                for (std::size_t i = 0; i < n.widths[l]; ++i) v += a[s][i] * n.p[n.w_at(l, i, o)];
                z[s][o] = v;
            }
        }
        if (tr) tr->pre.push_back(z);
        if (l + 1 < layers) {
            for (auto& row : z) {
                for (double& v : row) v = v > 0.0 ? v : 0.0;
            }
        }
        a = z;
        if (tr) tr->acts.push_back(a);
    }
    return a;
}

// Returns dLoss/dparams and writes dLoss/dinput into `dx`.
inline Vec backward(const Net& n, const Trace& tr, const Mat& dout, Mat* dx = nullptr) {
    const std::size_t layers = n.widths.size() - 1;
    Vec g(n.p.size(), 0.0);
    Mat d = dout;
    for (std::size_t l = layers; l-- > 0;) {
        if (l + 1 < layers) {
            for (std::size_t s = 0; s < d.size(); ++s) {
                for (std::size_t o = 0; o < d[s].size(); ++o) {
                    if (!(tr.pre[l][s][o] > 0.0)) d[s][o] = 0.0;
                }
            }
        }
        const Mat& in = tr.acts[l];
        Mat din(in.size(), Vec(n.widths[l], 0.0));
        for (std::size_t s = 0; s < in.size(); ++s) {
            for (std::size_t o = 0; o < n.widths[l + 1]; ++o) {
                g[n.b_at(l, o)] += d[s][o];
                for (std::size_t i = 0; i < n.widths[l]; ++i) {
                    g[n.w_at(l, i, o)] += in[s][i] * d[s][o];
                    din[s][i] += n.p[n.w_at(l, i, o)] * d[s][o];
                }
            }
        }
        d = din;
    }
    if (dx) *dx = d;
    return g;
}

// Mean softmax cross-entropy; dlogits gets (p - onehot) / rows.
inline double cross_entropy(const Mat& logits, const std::vector<std::size_t>& y, Mat& dlogits) {
    const double rows = static_cast<double>(logits.size());
    double loss = 0.0;
    dlogits = logits;
    for (std::size_t s = 0; s < logits.size(); ++s) {
        double mx = logits[s][0];
        for (double v : logits[s]) mx = v > mx ? v : mx;
        double z = 0.0;
        for (double v : logits[s]) z += std::exp(v - mx);
        for (std::size_t c = 0; c < logits[s].size(); ++c) {
            const double p = std::exp(logits[s][c] - mx) / z;
            dlogits[s][c] = (p - (c == y[s] ? 1.0 : 0.0)) / rows;
        }
        loss += -(logits[s][y[s]] - mx - std::log(z));
    }
    return loss / rows;
}

struct Client {
    Net encoder, classifier, discriminator;
    double fusion = 0.5;
    Mat x;
    std::vector<std::size_t> y;
    double discrimination_loss = 0.0;
};

struct Settings {
    double lr = 0.1;
    double lambda = 0.1;
    std::size_t dcc_epochs = 1;
    std::size_t aff_epochs = 1;
};

inline void sgd(Vec& p, const Vec& g, double lr) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

// One client's contribution to a round: stage one, then stage two.
inline void client_round(Client& c, const Net& global, const Settings& s) {
    const std::size_t n = c.x.size();
    const Mat fg = forward(global, c.x);
    for (std::size_t e = 0; e < s.dcc_epochs; ++e) {
        Trace te, tc, td;
        const Mat fl = forward(c.encoder, c.x, &te);
        Mat dlog;
        cross_entropy(forward(c.classifier, fl, &tc), c.y, dlog);
        Mat dfl_c;
        const Vec g_cls = backward(c.classifier, tc, dlog, &dfl_c);

        Mat stacked = fl;
        stacked.insert(stacked.end(), fg.begin(), fg.end());
        std::vector<std::size_t> origin(2 * n, 1);
        for (std::size_t i = 0; i < n; ++i) origin[i] = 0;
        Mat ddlog;
        c.discrimination_loss = cross_entropy(forward(c.discriminator, stacked, &td), origin, ddlog);
        Mat dstacked;
        Vec g_disc = backward(c.discriminator, td, ddlog, &dstacked);

        Mat dfl = dfl_c;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < dfl[i].size(); ++j) dfl[i][j] -= s.lambda * dstacked[i][j];
        }
        const Vec g_enc = backward(c.encoder, te, dfl);
        for (double& g : g_disc) g *= s.lambda;

        sgd(c.encoder.p, g_enc, s.lr);
        sgd(c.classifier.p, g_cls, s.lr);
        sgd(c.discriminator.p, g_disc, s.lr);
    }
}

// Stage two, run after the encoder has been uploaded.
inline void client_fusion(Client& c, const Net& global, const Settings& s) {
    const Mat fg = forward(global, c.x);
    for (std::size_t e = 0; e < s.aff_epochs; ++e) {
        Trace te, tc;
        const Mat fl = forward(c.encoder, c.x, &te);
        const double a = c.fusion;
        Mat f = fl;
        for (std::size_t i = 0; i < f.size(); ++i) {
            for (std::size_t j = 0; j < f[i].size(); ++j) f[i][j] = a * fg[i][j] + (1.0 - a) * fl[i][j];
        }
        Mat dlog;
        cross_entropy(forward(c.classifier, f, &tc), c.y, dlog);
        Mat df;
        const Vec g_cls = backward(c.classifier, tc, dlog, &df);
        double g_a = 0.0;
        Mat dfl = df;
        for (std::size_t i = 0; i < df.size(); ++i) {
            for (std::size_t j = 0; j < df[i].size(); ++j) {
                g_a += df[i][j] * (fg[i][j] - fl[i][j]);
                dfl[i][j] = (1.0 - a) * df[i][j];
            }
        }
        const Vec g_enc = backward(c.encoder, te, dfl);
        sgd(c.encoder.p, g_enc, s.lr);
        sgd(c.classifier.p, g_cls, s.lr);
        c.fusion -= s.lr * g_a;
    }
}

// Full round; returns the next global encoder parameters.
inline Vec round(std::vector<Client>& clients, const Net& global, const Settings& s) {
    std::vector<Vec> uploads;
    std::vector<double> losses;
    for (auto& c : clients) {
        client_round(c, global, s);
        uploads.push_back(c.encoder.p);
        losses.push_back(c.discrimination_loss);
    }
    for (auto& c : clients) client_fusion(c, global, s);
    double total = 0.0;
    for (double l : losses) total += l;
    Vec next(global.p.size(), 0.0);
    for (std::size_t k = 0; k < clients.size(); ++k) {
        const double w = total < 1e-12 ? 1.0 / static_cast<double>(clients.size()) : losses[k] / total;
        for (std::size_t i = 0; i < next.size(); ++i) next[i] += w * uploads[k][i];
    }
    return next;
}

}  // namespace straight_line
