#include "mmfa/autograd.hpp"

#include <cmath>
#include <memory>

namespace mmfa::ag {

Tape::Id Tape::push(Mat value, bool needs_grad, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
}

Tape::Id Tape::leaf(Mat value, bool needs_grad) {
    return push(std::move(value), needs_grad, nullptr);
}

Mat& Tape::grad_buf(Id id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

const Mat& Tape::grad(Id id) const {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) {
        throw StateError("autograd: gradient was never propagated to this node");
    }
    return n.grad;
}

void Tape::accumulate(Id id, const Mat& g) {
    if (!nodes_[id].needs_grad) return;
    grad_buf(id) += g;
}

void Tape::zero_grad() {
    for (Node& n : nodes_) n.grad.resize(0, 0);
}

void Tape::backward(Id root, const Mat& seed) {
    if (seed.rows() != nodes_[root].value.rows() || seed.cols() != nodes_[root].value.cols()) {
        throw InputError("autograd: backward seed shape mismatch");
    }
    grad_buf(root) += seed;
    // Tape order is topological, so one reverse sweep suffices.
    for (Id i = root; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.back || n.grad.size() == 0 || !n.needs_grad) continue;
        n.back(*this);
    }
}

Tape::Id Tape::matmul(Id a, Id b) {
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    return push(nodes_[a].value * nodes_[b].value, ng, [self, a, b](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        t.accumulate(a, g * t.nodes_[b].value.transpose());
        t.accumulate(b, t.nodes_[a].value.transpose() * g);
    });
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    return push(nodes_[a].value * nodes_[b].value.transpose(), ng, [self, a, b](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        t.accumulate(a, g * t.nodes_[b].value);
        t.accumulate(b, g.transpose() * t.nodes_[a].value);
    });
}

Tape::Id Tape::add(Id a, Id b) {
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    return push(nodes_[a].value + nodes_[b].value, ng, [self, a, b](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Tape::Id Tape::sub(Id a, Id b) {
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    return push(nodes_[a].value - nodes_[b].value, ng, [self, a, b](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        t.accumulate(a, g);
        t.accumulate(b, -g);
    });
}

Tape::Id Tape::hadamard(Id a, Id b) {
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    return push(nodes_[a].value.cwiseProduct(nodes_[b].value), ng, [self, a, b](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        t.accumulate(a, g.cwiseProduct(t.nodes_[b].value));
        t.accumulate(b, g.cwiseProduct(t.nodes_[a].value));
    });
}

Tape::Id Tape::scale(Id a, double s) {
    bool ng = nodes_[a].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    return push(nodes_[a].value * s, ng, [self, a, s](Tape& t) {
        t.accumulate(a, t.nodes_[self].grad * s);
    });
}

Tape::Id Tape::add_rowvec(Id a, Id b) {
    if (nodes_[b].value.rows() != 1 || nodes_[b].value.cols() != nodes_[a].value.cols()) {
        throw InputError("autograd: add_rowvec shape mismatch");
    }
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    Mat v = nodes_[a].value;
    v.rowwise() += nodes_[b].value.row(0);
    return push(std::move(v), ng, [self, a, b](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        t.accumulate(a, g);
        t.accumulate(b, g.colwise().sum());
    });
}

Tape::Id Tape::row_softmax(Id a) {
    const Mat& x = nodes_[a].value;
    Mat p(x.rows(), x.cols());
    for (int r = 0; r < x.rows(); ++r) {
        double m = x.row(r).maxCoeff();
        Eigen::RowVectorXd e = (x.row(r).array() - m).exp().matrix();
        p.row(r) = e / e.sum();
    }
    bool ng = nodes_[a].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    return push(std::move(p), ng, [self, a](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        const Mat& p = t.nodes_[self].value;
        Mat dx(p.rows(), p.cols());
        for (int r = 0; r < p.rows(); ++r) {
            double dot = g.row(r).dot(p.row(r));
            dx.row(r) = (p.row(r).array() * (g.row(r).array() - dot)).matrix();
        }
        t.accumulate(a, dx);
    });
}

Tape::Id Tape::layer_norm(Id x, Id gamma, Id beta, double eps) {
    const Mat& xv = nodes_[x].value;
    const int n = static_cast<int>(xv.cols());
    Mat xhat(xv.rows(), n);
    Vec inv_sigma(xv.rows());
    for (int r = 0; r < xv.rows(); ++r) {
        double mu = xv.row(r).mean();
        Eigen::RowVectorXd c = (xv.row(r).array() - mu).matrix();
        double var = c.squaredNorm() / n;
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma(r) = is;
        xhat.row(r) = c * is;
    }
    const Eigen::RowVectorXd gam = nodes_[gamma].value.row(0);
    const Eigen::RowVectorXd bet = nodes_[beta].value.row(0);
    Mat out(xv.rows(), n);
    for (int r = 0; r < xv.rows(); ++r) {
        out.row(r) = xhat.row(r).cwiseProduct(gam) + bet;
    }
    bool ng = nodes_[x].needs_grad || nodes_[gamma].needs_grad || nodes_[beta].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    auto xhat_p = std::make_shared<Mat>(std::move(xhat));
    auto is_p = std::make_shared<Vec>(std::move(inv_sigma));
    return push(std::move(out), ng, [self, x, gamma, beta, xhat_p, is_p, n](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        const Mat& xh = *xhat_p;
        t.accumulate(beta, g.colwise().sum());
        t.accumulate(gamma, g.cwiseProduct(xh).colwise().sum());
        if (t.nodes_[x].needs_grad) {
            const Eigen::RowVectorXd gam = t.nodes_[gamma].value.row(0);
            Mat dx(g.rows(), n);
            for (int r = 0; r < g.rows(); ++r) {
                Eigen::RowVectorXd gy = g.row(r).cwiseProduct(gam);
                double mean_gy = gy.mean();
                double mean_gy_xh = gy.cwiseProduct(xh.row(r)).mean();
                dx.row(r) =
                    ((*is_p)(r) * (gy.array() - mean_gy - xh.row(r).array() * mean_gy_xh)).matrix();
            }
            t.accumulate(x, dx);
        }
    });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tape::Id Tape::gelu(Id a) {
    const Mat& x = nodes_[a].value;
    Mat u = (kGeluC * (x.array() + kGeluA * x.array().cube())).tanh().matrix();
    Mat v = (0.5 * x.array() * (1.0 + u.array())).matrix();
    bool ng = nodes_[a].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    auto u_p = std::make_shared<Mat>(std::move(u));
    return push(std::move(v), ng, [self, a, u_p](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        const Mat& x = t.nodes_[a].value;
        const Mat& u = *u_p;
        Eigen::ArrayXXd du = kGeluC * (1.0 + 3.0 * kGeluA * x.array().square());
        Eigen::ArrayXXd d = 0.5 * (1.0 + u.array()) + 0.5 * x.array() * (1.0 - u.array().square()) * du;
        t.accumulate(a, (g.array() * d).matrix());
    });
}

Tape::Id Tape::abs(Id a) {
    bool ng = nodes_[a].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    return push(nodes_[a].value.cwiseAbs(), ng, [self, a](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        const Mat& x = t.nodes_[a].value;
        t.accumulate(a, (g.array() * x.array().sign()).matrix());
    });
}

Tape::Id Tape::sum_all(Id a) {
    bool ng = nodes_[a].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    Mat v(1, 1);
    v(0, 0) = nodes_[a].value.sum();
    return push(std::move(v), ng, [self, a](Tape& t) {
        double g = t.nodes_[self].grad(0, 0);
        t.accumulate(a, Mat::Constant(t.nodes_[a].value.rows(), t.nodes_[a].value.cols(), g));
    });
}

Tape::Id Tape::rows_slice(Id a, int row0, int nrows) {
    if (row0 < 0 || nrows < 0 || row0 + nrows > nodes_[a].value.rows()) {
        throw InputError("autograd: rows_slice out of range");
    }
    bool ng = nodes_[a].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    return push(nodes_[a].value.middleRows(row0, nrows), ng, [self, a, row0, nrows](Tape& t) {
        if (!t.nodes_[a].needs_grad) return;
        t.grad_buf(a).middleRows(row0, nrows) += t.nodes_[self].grad;
    });
}

Tape::Id Tape::concat_rows(const std::vector<Id>& parts) {
    if (parts.empty()) throw InputError("autograd: concat_rows of nothing");
    int cols = static_cast<int>(nodes_[parts[0]].value.cols());
    int rows = 0;
    bool ng = false;
    for (Id p : parts) {
        if (nodes_[p].value.cols() != cols) throw InputError("autograd: concat_rows column mismatch");
        rows += static_cast<int>(nodes_[p].value.rows());
        ng = ng || nodes_[p].needs_grad;
    }
    Mat v(rows, cols);
    int r = 0;
    for (Id p : parts) {
        int pr = static_cast<int>(nodes_[p].value.rows());
        v.middleRows(r, pr) = nodes_[p].value;
        r += pr;
    }
    Id self = static_cast<Id>(nodes_.size());
    auto parts_p = std::make_shared<std::vector<Id>>(parts);
    return push(std::move(v), ng, [self, parts_p](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        int r = 0;
        for (Id p : *parts_p) {
            int pr = static_cast<int>(t.nodes_[p].value.rows());
            t.accumulate(p, g.middleRows(r, pr));
            r += pr;
        }
    });
}

Tape::Id Tape::concat_cols(const std::vector<Id>& parts) {
    if (parts.empty()) throw InputError("autograd: concat_cols of nothing");
    int rows = static_cast<int>(nodes_[parts[0]].value.rows());
    int cols = 0;
    bool ng = false;
    for (Id p : parts) {
        if (nodes_[p].value.rows() != rows) throw InputError("autograd: concat_cols row mismatch");
        cols += static_cast<int>(nodes_[p].value.cols());
        ng = ng || nodes_[p].needs_grad;
    }
    Mat v(rows, cols);
    int c = 0;
    for (Id p : parts) {
        int pc = static_cast<int>(nodes_[p].value.cols());
        v.middleCols(c, pc) = nodes_[p].value;
        c += pc;
    }
    Id self = static_cast<Id>(nodes_.size());
    auto parts_p = std::make_shared<std::vector<Id>>(parts);
    return push(std::move(v), ng, [self, parts_p](Tape& t) {
        const Mat& g = t.nodes_[self].grad;
        int c = 0;
        for (Id p : *parts_p) {
            int pc = static_cast<int>(t.nodes_[p].value.cols());
            t.accumulate(p, g.middleCols(c, pc));
            c += pc;
        }
    });
}

Tape::Id Tape::embed_rows(Id table, const std::vector<int>& indices) {
    const Mat& tab = nodes_[table].value;
    Mat v(static_cast<int>(indices.size()), tab.cols());
    for (size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || indices[i] >= tab.rows()) {
            throw InputError("autograd: embedding index out of range");
        }
        v.row(static_cast<int>(i)) = tab.row(indices[i]);
    }
    bool ng = nodes_[table].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    auto idx_p = std::make_shared<std::vector<int>>(indices);
    return push(std::move(v), ng, [self, table, idx_p](Tape& t) {
        if (!t.nodes_[table].needs_grad) return;
        const Mat& g = t.nodes_[self].grad;
        Mat& gt = t.grad_buf(table);
        for (size_t i = 0; i < idx_p->size(); ++i) {
            gt.row((*idx_p)[i]) += g.row(static_cast<int>(i));
        }
    });
}

Tape::Id Tape::cross_entropy(Id logits, int label) {
    const Mat& z = nodes_[logits].value;
    if (z.rows() != 1) throw InputError("autograd: cross_entropy expects a 1xC logits row");
    if (label < 0 || label >= z.cols()) throw InputError("autograd: cross_entropy label out of range");
    double m = z.row(0).maxCoeff();
    Eigen::RowVectorXd e = (z.row(0).array() - m).exp().matrix();
    double lse = m + std::log(e.sum());
    Mat v(1, 1);
    v(0, 0) = lse - z(0, label);
    bool ng = nodes_[logits].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    auto p_p = std::make_shared<Eigen::RowVectorXd>(e / e.sum());
    return push(std::move(v), ng, [self, logits, label, p_p](Tape& t) {
        double g = t.nodes_[self].grad(0, 0);
        Mat d = *p_p;
        d(0, label) -= 1.0;
        t.accumulate(logits, g * d);
    });
}

Tape::Id Tape::mse_const(Id x, Mat target) {
    const Mat& xv = nodes_[x].value;
    if (xv.rows() != target.rows() || xv.cols() != target.cols()) {
        throw InputError("autograd: mse_const shape mismatch");
    }
    double n = static_cast<double>(xv.size());
    Mat v(1, 1);
    v(0, 0) = (xv - target).squaredNorm() / n;
    bool ng = nodes_[x].needs_grad;
    Id self = static_cast<Id>(nodes_.size());
    auto tgt = std::make_shared<Mat>(std::move(target));
    return push(std::move(v), ng, [self, x, tgt, n](Tape& t) {
        double g = t.nodes_[self].grad(0, 0);
        t.accumulate(x, (2.0 * g / n) * (t.nodes_[x].value - *tgt));
    });
}

}  // namespace mmfa::ag
