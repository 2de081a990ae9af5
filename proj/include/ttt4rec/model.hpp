#pragma once

#include "ttt4rec/backbone.hpp"
#include "ttt4rec/data.hpp"
#include "ttt4rec/optim.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ttt4rec {

struct ModelConfig {
    Index embed_dim{64};
    int blocks{1};
    BackboneKind backbone{BackboneKind::transformer};
    InnerKind inner{InnerKind::mlp};
    Index inner_hidden{256};
    double rope_factor{1000.0};
    double inner_lr{0.1};
    bool adapt_at_eval{true};
    double dropout_rate{0.2};
    Index max_context{100};
    double outer_lr{0.001};
    int batch_size{64};
    int epochs{10};
    std::uint64_t seed{42};
    bool tie_head{false};
    bool targets_all{true};  // per-position next-item targets; false = final item only
    Index conv_width{4};

    void validate() const;  // throws ConfigError listing every problem
};

const char* backbone_name(BackboneKind k);
const char* inner_name(InnerKind k);
BackboneKind parse_backbone(const std::string& s);
InnerKind parse_inner(const std::string& s);

class Model {
public:
    Model(const ModelConfig& cfg, Index vocab);

    const ModelConfig& config() const { return cfg_; }
    Index vocab() const { return vocab_; }
    const EmbeddingLayer& embedding() const { return embedding_; }
    const std::vector<ResidualBlockParams>& blocks() const { return blocks_; }

    // Stable, name-sorted-by-construction parameter list. The same order is
    // used by the optimizer and the checkpoint format.
    std::vector<std::pair<std::string, TensorPtr>> named_parameters() const;
    std::vector<TensorPtr> parameters() const;
    void zero_grad() const;
    // The padding embedding row takes no updates.
    void clear_padding_grad() const { embedding_.table.clear_padding_grad(); }

    // Graph forward over one (possibly left-padded) sequence; returns the
    // per-position representations with masked rows zeroed. When step_losses
    // is supplied it receives one reconstruction loss per block per position.
    TensorPtr forward_sequence(std::span<const std::int32_t> items,
                               std::span<const std::uint8_t> valid, Mode mode,
                               Rng& dropout_rng,
                               std::vector<double>* step_losses = nullptr) const;

    // Ranking head over items 1..vocab (row i scores item i+1).
    TensorPtr head_matrix() const;                    // vocab x dim
    TensorPtr predict_scores(const TensorPtr& h) const;

    // ---- streaming inference (eval mode only) ----
    // Pushes one item at a time and keeps the adaptive state across pushes.
    // Runs the exact same arithmetic as forward_sequence, so outputs are
    // bitwise identical to the graph path.
    struct Stream {
        struct BlockState {
            std::vector<double> linear_map;
            std::vector<double> mlp_hidden, mlp_readout;
            std::vector<std::vector<double>> conv_history;  // trailing shared-projection rows
            double last_inner_loss{0.0};
        };
        std::vector<BlockState> blocks;
        Index position{0};
        bool adapt{true};
        std::vector<double> last_h;
        double last_inner_loss{0.0};  // mean over blocks for the last push
    };

    Stream stream_begin(bool adapt) const;
    void stream_push(Stream& s, std::int32_t item) const;
    std::vector<double> stream_scores(const Stream& s) const;

private:
    ModelConfig cfg_;
    Index vocab_{0};
    EmbeddingLayer embedding_;
    std::vector<ResidualBlockParams> blocks_;
    TensorPtr head_;  // null when tied to the embedding table
};

struct TrainResult {
    double mean_loss{0.0};
    std::int64_t target_positions{0};
};

// One pass over every user's training segment: per-position next-item
// cross-entropy over valid positions, backward, Adam step. Batches are
// shuffled per epoch from the model seed, so a fixed seed reproduces the
// run exactly.
TrainResult train_epoch(const Model& model, const SequenceDataset& data, AdamState& opt,
                        int epoch_index);

// Gradient magnitude per parameter on one batch, without updating anything.
std::vector<std::pair<std::string, double>> gradient_norms(const Model& model,
                                                           const SequenceDataset& data);

// Re-draws every parameter at the given weight scale (norm gains near one,
// biases small). Gradient verification uses this to keep all gradient
// magnitudes well above the finite-difference noise floor; training-quality
// initialization stays as constructed.
void randomize_parameters(const Model& model, double weight_scale, Rng& rng);

}  // namespace ttt4rec
