#pragma once

// Toy hybrid backbone: token + learned positional embeddings, a configurable
// interleaving of gated-delta-rule / SSD recurrent layers with causal
// multi-head attention, and an untied LM head. One forward interface supports
// four adaptation hooks: learned initial recurrent states, per-step state
// offsets, low-rank attention-projection deltas, and learned prefix key/value
// slots read additively by attention.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "s0lab/recurrence.hpp"
#include "s0lab/tensor.hpp"

namespace s0lab {

constexpr int kEosToken = 0;

enum class LayerKind { GDN, SSD, ATTN };

const char* layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(const std::string& name);

struct ModelConfig {
    int vocab_size{64};
    int d_model{64};
    int n_layers{8};
    std::vector<LayerKind> layer_pattern;  // defaulted to 3 recurrent : 1 attention
    int heads{2};
    int key_dim{16};
    int value_dim{16};
    int ssd_state_dim{8};
    int max_seq_len{48};
    // FalconH1-style topology: every layer runs its recurrence and attention
    // in parallel on the same normalized input and sums the branches.
    bool parallel_mix{false};

    static std::vector<LayerKind> default_pattern(int n_layers);
    void validate() const;
    int attn_head_dim() const { return d_model / heads; }
    bool layer_has_recurrence(int layer) const;
    bool layer_has_attention(int layer) const;
};

struct LayerWeights {
    LayerKind kind{LayerKind::GDN};
    Tensor norm_gain;  // (D)
    // Recurrent branch.
    Tensor wk, wv, wq, wo;       // projections in/out of the per-head state
    Tensor w_decay, b_decay;     // decay gate, sigmoid-squashed
    Tensor w_beta, b_beta;       // write gate (GDN only)
    // Attention branch.
    Tensor attn_wq, attn_wk, attn_wv, attn_wo;  // (D,D) each
};

struct HybridModel {
    ModelConfig config;
    Tensor tok_emb;  // (V,D)
    Tensor pos_emb;  // (max_seq,D)
    std::vector<LayerWeights> layers;
    Tensor final_norm_gain;  // (D)
    Tensor lm_head;          // (D,V)
    bool frozen{false};

    // Weights in a fixed, documented order (checksums, optimizers, checkpoints).
    std::vector<Tensor> all_weights() const;
    std::int64_t parameter_count() const;
    std::string weight_checksum() const;  // SHA-256 over little-endian doubles

    // Model-layer indices that carry a recurrent state, in layer order.
    std::vector<int> recurrent_layers() const;
    // Model-layer indices that carry an attention branch, in layer order.
    std::vector<int> attention_layers() const;
    RecurrenceKind recurrence_kind(int layer) const;
    Shape state_shape(int layer) const;  // (heads, rows, cols)
};

// ----------------------------- adaptations -----------------------------

// Learned initial state per recurrent layer plus the injection scale. Slots
// follow recurrent_layers() order; untuned slots hold exact zeros.
struct StateBank {
    std::vector<Tensor> s0;
    double alpha{1.0};
    std::vector<bool> tuned;

    static StateBank zeros(const HybridModel& model, double alpha = 1.0);
    std::int64_t parameter_count() const;  // tuned slots only
};

// Learned per-step state offset per recurrent layer.
struct OffsetBank {
    std::vector<Tensor> deltas;

    static OffsetBank zeros(const HybridModel& model);
    std::int64_t parameter_count() const;
};

enum class LoraProj { Q = 0, K = 1, V = 2, O = 3 };

const char* lora_proj_name(LoraProj p);

struct LoraEntry {
    int layer{0};  // model layer index (attention branch)
    LoraProj proj{LoraProj::Q};
    Tensor a;  // (rank, d)  Gaussian init
    Tensor b;  // (d, rank)  zero init
};

// Low-rank deltas on attention projections: W_eff = W + (lora_alpha/rank) B A.
struct LoraAdapters {
    int rank{1};
    double lora_alpha{2.0};
    std::vector<LoraEntry> entries;

    std::int64_t parameter_count() const;
    const LoraEntry* find(int layer, LoraProj proj) const;
};

// Learned prefix key/value slots per attention layer, consulted by every
// query through an additive softmax read so that zero values are exactly
// inert at the output.
struct PrefixParams {
    int n_virtual{1};
    std::vector<Tensor> key_prefix;    // per attention layer: (n_virtual, D)
    std::vector<Tensor> value_prefix;  // per attention layer: (n_virtual, D)

    static PrefixParams zeros(const HybridModel& model, int n_virtual);
    std::int64_t parameter_count() const;
};

// At most one adaptation active per run.
struct AdaptationBundle {
    const StateBank* state{nullptr};
    const OffsetBank* offset{nullptr};
    const LoraAdapters* lora{nullptr};
    const PrefixParams* prefix{nullptr};

    static AdaptationBundle none() { return {}; }
    static AdaptationBundle with_state(const StateBank& b);
    static AdaptationBundle with_offset(const OffsetBank& b);
    static AdaptationBundle with_lora(const LoraAdapters& b);
    static AdaptationBundle with_prefix(const PrefixParams& b);
    int active_count() const;
    void validate(const HybridModel& model) const;
};

// ----------------------------- forward & generation -----------------------------

struct ForwardResult {
    Tensor logits;                            // (T, vocab)
    std::vector<std::vector<Tensor>> states;  // [recurrent slot][t]: (H,rows,cols)
    std::vector<Tensor> hidden;               // [layer]: (T, d_model) post-block residual
};

HybridModel init_model(const ModelConfig& config, std::uint64_t seed);

ForwardResult forward(const HybridModel& model, std::span<const int> tokens,
                      const AdaptationBundle& bundle);

// Same computation with the per-recurrent-layer initial states supplied
// explicitly (indexed by recurrent slot). forward() with a StateBank resolves
// to this entry point with alpha * S0, which is what makes injected states
// structurally free at inference.
ForwardResult forward_with_states(const HybridModel& model, std::span<const int> tokens,
                                  const std::vector<Tensor>& initial_states);

std::vector<int> generate_greedy(const HybridModel& model, std::span<const int> prompt,
                                 const AdaptationBundle& bundle, int max_new);

std::vector<std::vector<int>> generate_sampled(const HybridModel& model,
                                               std::span<const int> prompt,
                                               const AdaptationBundle& bundle, double temperature,
                                               std::uint64_t seed, int n);

struct PretrainOptions {
    int steps{2000};
    double lr{3e-3};
    int batch_size{8};
    std::uint64_t seed{1};
    int log_every{100};
};

struct PretrainTraceRow {
    int step{0};
    double loss{0.0};
};

// Next-token training over full sequences; freezes the model afterwards.
std::vector<PretrainTraceRow> pretrain_backbone(HybridModel& model,
                                                const std::vector<std::vector<int>>& corpus,
                                                const PretrainOptions& opts);

}  // namespace s0lab
