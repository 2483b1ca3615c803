#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "klp/catalog.hpp"
#include "klp/error.hpp"

namespace klp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Finite real vector. Vectors that enter a similarity are unit-normalized
/// first through normalized().
class EmbeddingVector {
public:
    EmbeddingVector() = default;
    /// Throws NumericError on NaN or infinite entries.
    explicit EmbeddingVector(Vector values);
    explicit EmbeddingVector(const std::vector<double>& values);

    std::size_t dimension() const noexcept { return static_cast<std::size_t>(values_.size()); }
    const Vector& values() const noexcept { return values_; }
    double operator[](std::size_t i) const { return values_[static_cast<Eigen::Index>(i)]; }
    double norm() const { return values_.norm(); }
    /// Throws NumericError for a zero vector.
    EmbeddingVector normalized() const;
    std::vector<double> to_std() const { return {values_.data(), values_.data() + values_.size()}; }

    bool operator==(const EmbeddingVector& other) const {
        return values_.size() == other.values_.size() && values_ == other.values_;
    }

private:
    Vector values_;
};

/// Keyed vectors of one shared dimension. Product vectors use the keys
/// image_key(id) / text_key(id); attribute vectors use Attribute::text().
class EmbeddingStore {
public:
    explicit EmbeddingStore(std::size_t dimension = 0) : dimension_(dimension) {}

    std::size_t dimension() const noexcept { return dimension_; }
    std::size_t size() const noexcept { return entries_.size(); }
    /// Throws ValidationError on a dimension mismatch. Replaces existing keys.
    void insert(std::string key, EmbeddingVector v);
    const EmbeddingVector* find(std::string_view key) const;
    const EmbeddingVector& at(std::string_view key) const;
    const std::map<std::string, EmbeddingVector, std::less<>>& entries() const noexcept { return entries_; }

private:
    std::size_t dimension_;
    std::map<std::string, EmbeddingVector, std::less<>> entries_;
};

std::string image_key(std::string_view product_id);
std::string text_key(std::string_view product_id);

/// Header line `{"dimension": d}` followed by `{"key", "vector"}` lines.
EmbeddingStore load_embeddings(const std::filesystem::path& path);
std::string serialize_embeddings(const EmbeddingStore& store);

/// Lowercased whitespace tokens with surrounding ASCII punctuation stripped.
std::vector<std::string> hash_tokens(std::string_view text);

/// Feature hashing of word unigrams and bigrams into `dimension` buckets with
/// hash-derived signs, unit-normalized. Platform independent.
/// Throws ValidationError for text without tokens or dimension < 8, and
/// NumericError if every feature cancels out.
EmbeddingVector hash_embed(std::string_view text, std::size_t dimension, std::uint64_t seed);

/// FNV-1a over the bytes, then mixed with the seed through splitmix64.
std::uint64_t feature_hash(std::string_view feature, std::uint64_t seed);

/// Element-wise sum, unit-normalized.
EmbeddingVector combine_product_embedding(const EmbeddingVector& image, const EmbeddingVector& text);

/// Cosine similarity clamped to [-1, 1].
double cosine_sim(const EmbeddingVector& a, const EmbeddingVector& b);

// ---------------------------------------------------------------------------
// Contrastive objective

struct SimilarityLoss {
    double loss = 0.0;             // reported objective (mean of directions when symmetric)
    double product_to_attribute = 0.0;
    double attribute_to_product = 0.0;
    Matrix grad_similarities;      // dLoss / dSim
    bool degenerate = false;       // single-candidate softmax
};

/// Mean-per-example InfoNCE over a similarity matrix `sims` (rows: products,
/// cols: attributes). positives[i] is the column of row i's positive; when
/// `symmetric`, positives must be a permutation and the mirrored
/// attribute-to-product direction is averaged in.
SimilarityLoss contrastive_loss_from_similarities(const Matrix& sims, std::span<const std::size_t> positives,
                                                  double temperature, bool symmetric);

struct ContrastiveResult {
    double loss = 0.0;
    double product_to_attribute = 0.0;
    double attribute_to_product = 0.0;
    Matrix grad_products;
    Matrix grad_attributes;
    bool degenerate = false;
};

/// Loss over cosine similarities between product rows and attribute rows,
/// with analytic gradients with respect to both (unnormalized) inputs.
ContrastiveResult contrastive_loss(const Matrix& products, const Matrix& attributes,
                                   std::span<const std::size_t> positives, double temperature, bool symmetric = true);

// ---------------------------------------------------------------------------
// Projection heads

/// Linear maps from the base space (rows) into the shared space (columns).
struct ProjectionHead {
    Matrix image;
    Matrix text;
    Matrix attribute;

    std::size_t base_dimension() const noexcept { return static_cast<std::size_t>(image.rows()); }
    std::size_t dimension() const noexcept { return static_cast<std::size_t>(image.cols()); }

    /// Throws ValidationError when shapes disagree or entries are not finite.
    void validate() const;

    Vector project_image(const Vector& base) const { return image.transpose() * base; }
    Vector project_text(const Vector& base) const { return text.transpose() * base; }
    Vector project_attribute(const Vector& base) const { return attribute.transpose() * base; }

    bool operator==(const ProjectionHead& o) const {
        return image == o.image && text == o.text && attribute == o.attribute;
    }
};

ProjectionHead identity_head(std::size_t dimension);

nlohmann::json to_json(const ProjectionHead& head);
ProjectionHead head_from_json(const nlohmann::json& j);
ProjectionHead load_head(const std::filesystem::path& path);

/// Unit product embedding f(x, t) from whichever base vectors exist.
/// Throws ValidationError if the product has neither.
EmbeddingVector product_embedding(const ProjectionHead& head, const EmbeddingVector* image_base,
                                  const EmbeddingVector* text_base);
EmbeddingVector attribute_embedding(const ProjectionHead& head, const EmbeddingVector& base);

struct TrainerConfig {
    double temperature = 0.07;
    double learning_rate = 1e-2;
    double momentum = 0.0;
    int epochs = 5;
    int batch_size = 32;
    std::uint64_t seed = 0;
    bool symmetric_loss = true;
    std::size_t dimension = 0;  // shared dimension; 0 means the base dimension

    void validate() const;
};

class TrainingDivergedError : public NumericError {
public:
    TrainingDivergedError(int epoch, std::size_t batch, double learning_rate);
    int epoch() const noexcept { return epoch_; }
    std::size_t batch() const noexcept { return batch_; }

private:
    int epoch_;
    std::size_t batch_;
};

struct TrainingReport {
    std::vector<double> epoch_losses;
    std::size_t pairs = 0;
    std::size_t batches_per_epoch = 0;
};

/// Initial heads: identity when the shared dimension equals the base
/// dimension, otherwise seeded random orthonormal columns.
ProjectionHead initial_head(std::size_t base_dimension, const TrainerConfig& cfg);

using TrainingPair = std::pair<std::string, Attribute>;

/// Mini-batch gradient descent on the contrastive objective with in-batch
/// negatives. Product bases come from image_key/text_key entries (either may
/// be absent), attribute bases from Attribute::text() entries.
ProjectionHead train_projection(const EmbeddingStore& store, const std::vector<TrainingPair>& pairs,
                                const TrainerConfig& cfg, TrainingReport* report = nullptr);

}  // namespace klp
