#pragma once

// The two recurrence families used by the hybrid backbone and the
// gating-product decay law.
//
// Per-head state is a (rows, cols) matrix updated once per token:
//
//   gated delta rule:  S_t = a_t * S_{t-1} * (I - b_t k_t k_t^T) + b_t v_t k_t^T
//   scalar-gated SSD:  S_t = A_t * S_{t-1} + x_t B_t^T
//
// For the delta rule, rows index the value dimension and cols the key
// dimension, so the erasure projector right-multiplies and the write is the
// outer product v k^T. The SSD write is the rank-1 outer product of the input
// vector with the state projection (rows = channel dim, cols = state dim).
// Both families read out y_t = S_t q_t.

#include <vector>

#include "s0lab/tensor.hpp"

namespace s0lab {

enum class RecurrenceKind { GDN, SSD };

const char* recurrence_kind_name(RecurrenceKind kind);

struct RecurrentState {
    RecurrenceKind kind{RecurrenceKind::GDN};
    Tensor S;  // (heads, rows, cols) flattened row-major

    static RecurrentState zeros(RecurrenceKind kind, int heads, int rows, int cols);
    int heads() const { return S.dim(0); }
    int rows() const { return S.dim(1); }
    int cols() const { return S.dim(2); }
};

// Gate and projection signals for one timestep across all heads. The decay
// slot holds a_t for GDN and the scalar A_t gate for SSD; beta is GDN-only.
// key/value hold (k_t, v_t) for GDN and (B_t, x_t) for SSD; query drives the
// readout y_t = S_t q_t.
struct GateSignals {
    RecurrenceKind kind{RecurrenceKind::GDN};
    Tensor decay;  // (heads), in [0,1]
    Tensor beta;   // (heads), in [0,1]; GDN only
    Tensor key;    // (heads, cols): k_t, unit norm per head (GDN) or B_t (SSD)
    Tensor value;  // (heads, rows): v_t (GDN) or x_t (SSD)
    Tensor query;  // (heads, cols)
};

struct ScanResult {
    RecurrentState final_state;
    std::vector<Tensor> readouts;       // per step: (heads, rows)
    std::vector<Tensor> states;         // per step: (heads, rows, cols)
};

RecurrentState gdn_step(const RecurrentState& prev, const GateSignals& g);
RecurrentState ssd_step(const RecurrentState& prev, const GateSignals& g);

// Sequential application of the kind-matching step op from s0, collecting
// per-step readouts y_t = S_t q_t.
ScanResult scan(const RecurrentState& s0, const std::vector<GateSignals>& gates);

// Product over steps of the per-step gating matrix G_t = a_t (I - b_t k_t k_t^T),
// per head, accumulated in step order so that the write-free scan satisfies
// final == S0 * product. Returns (heads, cols, cols).
Tensor decay_product(const std::vector<GateSignals>& gates);

}  // namespace s0lab
