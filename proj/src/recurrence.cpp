#include "s0lab/recurrence.hpp"

#include <cmath>
#include <string>

namespace s0lab {

namespace {

void check_gate_range(const Tensor& g, const char* name) {
    for (double v : g.data()) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw ContractError(std::string(name) + " gate " + std::to_string(v) +
                                " outside [0,1]");
        }
    }
}

void check_signals(const RecurrentState& prev, const GateSignals& g, RecurrenceKind expected,
                   const char* op) {
    if (prev.kind != expected || g.kind != expected) {
        throw ContractError(std::string(op) + ": recurrence kind mismatch");
    }
    const int h = prev.heads();
    if (g.decay.ndim() != 1 || g.decay.dim(0) != h) {
        throw ShapeError(std::string(op) + ": decay gate shape mismatch");
    }
    if (g.key.ndim() != 2 || g.key.dim(0) != h || g.key.dim(1) != prev.cols()) {
        throw ShapeError(std::string(op) + ": key shape mismatch");
    }
    if (g.value.ndim() != 2 || g.value.dim(0) != h || g.value.dim(1) != prev.rows()) {
        throw ShapeError(std::string(op) + ": value shape mismatch");
    }
    check_gate_range(g.decay, "decay");
}

Tensor head_matrix(const Tensor& t, int head, int r, int c) {
    return reshape(row(reshape(t, {t.dim(0), r * c}), head), {r, c});
}

Tensor assemble_heads(const std::vector<Tensor>& per_head, int r, int c) {
    std::vector<Tensor> flat;
    flat.reserve(per_head.size());
    for (const auto& m : per_head) {
        flat.push_back(reshape(m, {r * c}));
    }
    return reshape(stack_rows(flat), {static_cast<int>(per_head.size()), r, c});
}

}  // namespace

const char* recurrence_kind_name(RecurrenceKind kind) {
    return kind == RecurrenceKind::GDN ? "gdn" : "ssd";
}

RecurrentState RecurrentState::zeros(RecurrenceKind kind, int heads, int rows, int cols) {
    return RecurrentState{kind, Tensor::zeros({heads, rows, cols})};
}

RecurrentState gdn_step(const RecurrentState& prev, const GateSignals& g) {
    check_signals(prev, g, RecurrenceKind::GDN, "gdn_step");
    check_gate_range(g.beta, "beta");
    const int heads = prev.heads();
    const int r = prev.rows();
    const int c = prev.cols();
    // The erasure projector assumes unit keys whenever a write happens.
    for (int h = 0; h < heads; ++h) {
        if (g.beta.data()[static_cast<std::size_t>(h)] > 0.0) {
            double ss = 0.0;
            for (int j = 0; j < c; ++j) {
                const double v = g.key.data()[static_cast<std::size_t>(h) * c + j];
                ss += v * v;
            }
            if (std::fabs(std::sqrt(ss) - 1.0) > 1e-6) {
                throw ContractError("gdn_step: key for head " + std::to_string(h) +
                                    " is not unit norm");
            }
        }
    }

    const auto eye = Tensor::eye(c);
    std::vector<Tensor> next;
    next.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        auto s_h = head_matrix(prev.S, h, r, c);
        auto k_h = row(g.key, h);
        auto v_h = row(g.value, h);
        auto a_h = elem(g.decay, h);
        auto b_h = elem(g.beta, h);
        auto erase = sub(eye, scale_by(outer(k_h, k_h), b_h));
        auto carried = scale_by(matmul(s_h, erase), a_h);
        auto write = scale_by(outer(v_h, k_h), b_h);
        next.push_back(add(carried, write));
    }
    return RecurrentState{RecurrenceKind::GDN, assemble_heads(next, r, c)};
}

RecurrentState ssd_step(const RecurrentState& prev, const GateSignals& g) {
    check_signals(prev, g, RecurrenceKind::SSD, "ssd_step");
    const int heads = prev.heads();
    const int r = prev.rows();
    const int c = prev.cols();
    std::vector<Tensor> next;
    next.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        auto s_h = head_matrix(prev.S, h, r, c);
        auto carried = scale_by(s_h, elem(g.decay, h));
        auto write = outer(row(g.value, h), row(g.key, h));
        next.push_back(add(carried, write));
    }
    return RecurrentState{RecurrenceKind::SSD, assemble_heads(next, r, c)};
}

ScanResult scan(const RecurrentState& s0, const std::vector<GateSignals>& gates) {
    if (gates.empty()) {
        throw ContractError("scan: empty gate sequence");
    }
    for (const auto& g : gates) {
        if (g.kind != s0.kind) {
            throw ContractError("scan: gate kind does not match initial state kind");
        }
    }
    const int heads = s0.heads();
    const int r = s0.rows();
    const int c = s0.cols();

    ScanResult result;
    result.readouts.reserve(gates.size());
    result.states.reserve(gates.size());
    RecurrentState state = s0;
    for (const auto& g : gates) {
        state = s0.kind == RecurrenceKind::GDN ? gdn_step(state, g) : ssd_step(state, g);
        if (g.query.ndim() != 2 || g.query.dim(0) != heads || g.query.dim(1) != c) {
            throw ShapeError("scan: query shape mismatch");
        }
        std::vector<Tensor> ys;
        ys.reserve(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            ys.push_back(matvec(head_matrix(state.S, h, r, c), row(g.query, h)));
        }
        result.readouts.push_back(stack_rows(ys));
        result.states.push_back(state.S);
    }
    result.final_state = state;
    return result;
}

Tensor decay_product(const std::vector<GateSignals>& gates) {
    if (gates.empty()) {
        throw ContractError("decay_product: empty gate sequence");
    }
    const int heads = gates.front().decay.dim(0);
    const int c = gates.front().key.dim(1);
    std::vector<Tensor> prod;
    prod.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        prod.push_back(Tensor::eye(c));
    }
    const auto eye = Tensor::eye(c);
    for (const auto& g : gates) {
        if (g.kind != RecurrenceKind::GDN) {
            throw ContractError("decay_product is defined for gated-delta-rule gates only");
        }
        check_gate_range(g.decay, "decay");
        check_gate_range(g.beta, "beta");
        for (int h = 0; h < heads; ++h) {
            auto k_h = row(g.key, h);
            auto g_t = scale_by(sub(eye, scale_by(outer(k_h, k_h), elem(g.beta, h))),
                                elem(g.decay, h));
            prod[static_cast<std::size_t>(h)] = matmul(prod[static_cast<std::size_t>(h)], g_t);
        }
    }
    return assemble_heads(prod, c, c);
}

}  // namespace s0lab
