#include "klp/embed.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "klp/io.hpp"
#include "klp/random.hpp"

namespace klp {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Vectors and stores

EmbeddingVector::EmbeddingVector(Vector values) : values_(std::move(values)) {
    if (!values_.allFinite()) throw NumericError("embedding vector has non-finite entries");
}

EmbeddingVector::EmbeddingVector(const std::vector<double>& values)
    : EmbeddingVector(Vector(Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size())))) {}

EmbeddingVector EmbeddingVector::normalized() const {
    const double n = norm();
    if (n == 0.0) throw NumericError("cannot normalize a zero vector");
    return EmbeddingVector(Vector(values_ / n));
}

void EmbeddingStore::insert(std::string key, EmbeddingVector v) {
    if (dimension_ == 0) dimension_ = v.dimension();
    if (v.dimension() != dimension_) {
        throw ValidationError("embedding '" + key + "' has dimension " + std::to_string(v.dimension()) +
                              ", store expects " + std::to_string(dimension_));
    }
    entries_.insert_or_assign(std::move(key), std::move(v));
}

const EmbeddingVector* EmbeddingStore::find(std::string_view key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
}

const EmbeddingVector& EmbeddingStore::at(std::string_view key) const {
    if (const auto* v = find(key)) return *v;
    throw ValidationError("no embedding for '" + std::string(key) + "'");
}

std::string image_key(std::string_view product_id) { return "image/" + std::string(product_id); }
std::string text_key(std::string_view product_id) { return "text/" + std::string(product_id); }

EmbeddingStore load_embeddings(const std::filesystem::path& path) {
    std::optional<EmbeddingStore> store;
    io::for_each_jsonl(path, [&](const json& record, std::size_t line) {
        if (!store) {
            const auto& d = io::require_field(record, "dimension", line);
            if (!d.is_number_unsigned() || d.get<std::size_t>() == 0) {
                throw ParseError("header 'dimension' must be a positive integer", line);
            }
            store.emplace(d.get<std::size_t>());
            return;
        }
        auto key = io::require_string(record, "key", line);
        const auto& vec = io::require_field(record, "vector", line);
        if (!vec.is_array()) throw ParseError("field 'vector' must be an array", line);
        std::vector<double> values;
        values.reserve(vec.size());
        for (const auto& x : vec) {
            if (!x.is_number()) throw ParseError("vector entries must be numbers", line);
            values.push_back(x.get<double>());
        }
        try {
            store->insert(std::move(key), EmbeddingVector(values));
        } catch (const Error& e) {
            throw ParseError(e.what(), line);
        }
    });
    if (!store) throw ParseError(path.filename().string() + ": missing dimension header");
    return std::move(*store);
}

std::string serialize_embeddings(const EmbeddingStore& store) {
    std::string out = json{{"dimension", store.dimension()}}.dump() + '\n';
    for (const auto& [key, v] : store.entries()) out += json{{"key", key}, {"vector", v.to_std()}}.dump() + '\n';
    return out;
}

// ---------------------------------------------------------------------------
// Feature hashing

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t feature_hash(std::string_view feature, std::uint64_t seed) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : feature) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(h ^ splitmix64(seed));
}

std::vector<std::string> hash_tokens(std::string_view text) {
    std::vector<std::string> tokens;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        std::size_t b = i, e = j;
        while (b < e && std::ispunct(static_cast<unsigned char>(text[b]))) ++b;
        while (e > b && std::ispunct(static_cast<unsigned char>(text[e - 1]))) --e;
        if (b < e) {
            std::string tok(text.substr(b, e - b));
            for (auto& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            tokens.push_back(std::move(tok));
        }
        i = j;
    }
    return tokens;
}

EmbeddingVector hash_embed(std::string_view text, std::size_t dimension, std::uint64_t seed) {
    if (dimension < 8) throw ValidationError("hash embedding dimension must be at least 8");
    const auto tokens = hash_tokens(text);
    if (tokens.empty()) throw ValidationError("cannot embed empty text");

    Vector v = Vector::Zero(static_cast<Eigen::Index>(dimension));
    auto add = [&](std::string_view feature) {
        const auto h = feature_hash(feature, seed);
        v[static_cast<Eigen::Index>(h % dimension)] += (h >> 63) ? -1.0 : 1.0;
    };
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        add(tokens[i]);
        if (i + 1 < tokens.size()) add(tokens[i] + " " + tokens[i + 1]);
    }
    const double n = v.norm();
    if (n == 0.0) throw NumericError("hash features of '" + std::string(text) + "' cancel out");
    return EmbeddingVector(Vector(v / n));
}

EmbeddingVector combine_product_embedding(const EmbeddingVector& image, const EmbeddingVector& text) {
    if (image.dimension() != text.dimension()) {
        throw NumericError("cannot combine embeddings of dimension " + std::to_string(image.dimension()) +
                           " and " + std::to_string(text.dimension()));
    }
    const Vector sum = image.values() + text.values();
    const double n = sum.norm();
    // Relative check: antiparallel inputs leave only rounding residue.
    if (n <= 1e-12 * std::max(1.0, image.norm() + text.norm())) {
        throw NumericError("degenerate product embedding: image and text vectors cancel");
    }
    return EmbeddingVector(Vector(sum / n));
}

double cosine_sim(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.dimension() != b.dimension()) throw NumericError("cosine_sim: dimension mismatch");
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) throw NumericError("cosine_sim: zero-norm input");
    return std::clamp(a.values().dot(b.values()) / (na * nb), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Contrastive objective

SimilarityLoss contrastive_loss_from_similarities(const Matrix& sims, std::span<const std::size_t> positives,
                                                  double temperature, bool symmetric) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ValidationError("temperature must be positive");
    }
    const auto rows = static_cast<std::size_t>(sims.rows());
    const auto cols = static_cast<std::size_t>(sims.cols());
    if (rows == 0 || cols == 0) throw ValidationError("empty contrastive batch");
    if (positives.size() != rows) throw ValidationError("one positive per product row is required");
    for (auto p : positives) {
        if (p >= cols) throw ValidationError("positive index out of range");
    }

    std::vector<std::size_t> inverse;
    if (symmetric) {
        if (rows != cols) throw ValidationError("symmetric loss needs equal batch sizes");
        inverse.assign(cols, cols);
        for (std::size_t i = 0; i < rows; ++i) {
            if (inverse[positives[i]] != cols) throw ValidationError("symmetric loss needs a one-to-one positive map");
            inverse[positives[i]] = i;
        }
    }

    SimilarityLoss out;
    out.degenerate = cols == 1;
    if (out.degenerate) spdlog::warn("degenerate contrastive batch: softmax over a single candidate");

    const Matrix logits = sims / temperature;
    Matrix grad_logits = Matrix::Zero(sims.rows(), sims.cols());

    // Product -> attribute: softmax across each row.
    double forward = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const double m = logits.row(r).maxCoeff();
        const Eigen::RowVectorXd e = (logits.row(r).array() - m).exp().matrix();
        const double z = e.sum();
        forward += m + std::log(z) - logits(r, static_cast<Eigen::Index>(positives[i]));
        grad_logits.row(r) += e / z;
        grad_logits(r, static_cast<Eigen::Index>(positives[i])) -= 1.0;
    }
    forward /= static_cast<double>(rows);
    grad_logits /= static_cast<double>(rows);
    out.product_to_attribute = forward;

    if (!symmetric) {
        out.loss = forward;
        out.grad_similarities = grad_logits / temperature;
        return out;
    }

    // Attribute -> product: softmax down each column.
    double backward = 0.0;
    Matrix grad_back = Matrix::Zero(sims.rows(), sims.cols());
    for (std::size_t j = 0; j < cols; ++j) {
        const auto c = static_cast<Eigen::Index>(j);
        const double m = logits.col(c).maxCoeff();
        const Vector e = (logits.col(c).array() - m).exp().matrix();
        const double z = e.sum();
        backward += m + std::log(z) - logits(static_cast<Eigen::Index>(inverse[j]), c);
        grad_back.col(c) += e / z;
        grad_back(static_cast<Eigen::Index>(inverse[j]), c) -= 1.0;
    }
    backward /= static_cast<double>(cols);
    grad_back /= static_cast<double>(cols);
    out.attribute_to_product = backward;
    out.loss = 0.5 * (forward + backward);
    out.grad_similarities = 0.5 * (grad_logits + grad_back) / temperature;
    return out;
}

ContrastiveResult contrastive_loss(const Matrix& products, const Matrix& attributes,
                                   std::span<const std::size_t> positives, double temperature, bool symmetric) {
    if (products.cols() != attributes.cols()) throw ValidationError("contrastive_loss: dimension mismatch");
    const Vector pn = products.rowwise().norm();
    const Vector an = attributes.rowwise().norm();
    if ((pn.array() == 0.0).any() || (an.array() == 0.0).any()) {
        throw NumericError("contrastive_loss: zero-norm embedding in batch");
    }
    const Matrix p_hat = pn.cwiseInverse().asDiagonal() * products;
    const Matrix a_hat = an.cwiseInverse().asDiagonal() * attributes;
    const Matrix sims = p_hat * a_hat.transpose();

    auto base = contrastive_loss_from_similarities(sims, positives, temperature, symmetric);
    const Matrix& g = base.grad_similarities;
    const Matrix gs = g.cwiseProduct(sims);
    const Vector row_w = gs.rowwise().sum();
    const Vector col_w = gs.colwise().sum().transpose();

    ContrastiveResult out;
    out.loss = base.loss;
    out.product_to_attribute = base.product_to_attribute;
    out.attribute_to_product = base.attribute_to_product;
    out.degenerate = base.degenerate;
    // d cos(p, a) / dp = (a_hat - cos * p_hat) / |p|
    out.grad_products = pn.cwiseInverse().asDiagonal() * (g * a_hat - row_w.asDiagonal() * p_hat);
    out.grad_attributes = an.cwiseInverse().asDiagonal() * (g.transpose() * p_hat - col_w.asDiagonal() * a_hat);
    return out;
}

// ---------------------------------------------------------------------------
// Projection heads

void ProjectionHead::validate() const {
    if (image.rows() == 0 || image.cols() == 0) throw ValidationError("projection head is empty");
    if (text.rows() != image.rows() || text.cols() != image.cols() || attribute.rows() != image.rows() ||
        attribute.cols() != image.cols()) {
        throw ValidationError("projection head matrices have inconsistent shapes");
    }
    if (!image.allFinite() || !text.allFinite() || !attribute.allFinite()) {
        throw ValidationError("projection head has non-finite entries");
    }
}

ProjectionHead identity_head(std::size_t dimension) {
    const auto d = static_cast<Eigen::Index>(dimension);
    return {Matrix::Identity(d, d), Matrix::Identity(d, d), Matrix::Identity(d, d)};
}

namespace {

json matrix_to_json(const Matrix& m) {
    return std::vector<double>(m.data(), m.data() + m.size());
}

Matrix matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols, const char* name) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows * cols) {
        throw ParseError(std::string("head matrix '") + name + "' has wrong size");
    }
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows * cols; ++i) {
        const auto& x = j[static_cast<std::size_t>(i)];
        if (!x.is_number()) throw ParseError(std::string("head matrix '") + name + "' has non-numeric entry");
        m.data()[i] = x.get<double>();
    }
    return m;
}

}  // namespace

json to_json(const ProjectionHead& head) {
    return {{"base_dimension", head.base_dimension()},
            {"dimension", head.dimension()},
            {"image", matrix_to_json(head.image)},
            {"text", matrix_to_json(head.text)},
            {"attribute", matrix_to_json(head.attribute)}};
}

ProjectionHead head_from_json(const json& j) {
    const auto rows = io::require_field(j, "base_dimension").get<Eigen::Index>();
    const auto cols = io::require_field(j, "dimension").get<Eigen::Index>();
    if (rows <= 0 || cols <= 0) throw ParseError("head dimensions must be positive");
    ProjectionHead head{matrix_from_json(io::require_field(j, "image"), rows, cols, "image"),
                        matrix_from_json(io::require_field(j, "text"), rows, cols, "text"),
                        matrix_from_json(io::require_field(j, "attribute"), rows, cols, "attribute")};
    head.validate();
    return head;
}

ProjectionHead load_head(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(io::read_file(path));
    } catch (const json::parse_error& e) {
        throw ParseError(path.filename().string() + ": " + e.what());
    }
    return head_from_json(j);
}

EmbeddingVector product_embedding(const ProjectionHead& head, const EmbeddingVector* image_base,
                                  const EmbeddingVector* text_base) {
    if (!image_base && !text_base) throw ValidationError("product has neither image nor text embedding");
    if (image_base && text_base) {
        return combine_product_embedding(EmbeddingVector(head.project_image(image_base->values())),
                                         EmbeddingVector(head.project_text(text_base->values())));
    }
    const Vector v = image_base ? head.project_image(image_base->values()) : head.project_text(text_base->values());
    return EmbeddingVector(v).normalized();
}

EmbeddingVector attribute_embedding(const ProjectionHead& head, const EmbeddingVector& base) {
    return EmbeddingVector(head.project_attribute(base.values())).normalized();
}

// ---------------------------------------------------------------------------
// Training

void TrainerConfig::validate() const {
    if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
    if (!(learning_rate >= 0.0)) throw ValidationError("learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must be in [0, 1)");
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (batch_size < 2) throw ValidationError("batch_size must be >= 2");
}

TrainingDivergedError::TrainingDivergedError(int epoch, std::size_t batch, double learning_rate)
    : NumericError("training diverged (non-finite loss) at epoch " + std::to_string(epoch) + ", batch " +
                   std::to_string(batch) + ", learning rate " + std::to_string(learning_rate)),
      epoch_(epoch),
      batch_(batch) {}

using rnd::random_orthonormal;
using rnd::shuffle;

ProjectionHead initial_head(std::size_t base_dimension, const TrainerConfig& cfg) {
    const std::size_t d = cfg.dimension == 0 ? base_dimension : cfg.dimension;
    if (d == base_dimension) return identity_head(d);
    std::mt19937_64 rng(cfg.seed);
    ProjectionHead head;
    head.image = random_orthonormal(base_dimension, d, rng);
    head.text = random_orthonormal(base_dimension, d, rng);
    head.attribute = random_orthonormal(base_dimension, d, rng);
    return head;
}

ProjectionHead train_projection(const EmbeddingStore& store, const std::vector<TrainingPair>& pairs,
                                const TrainerConfig& cfg, TrainingReport* report) {
    cfg.validate();
    const auto base_dim = static_cast<Eigen::Index>(store.dimension());
    if (base_dim == 0) throw ValidationError("embedding store is empty");

    // Resolve every pair up front; missing image or text bases contribute zero.
    const Vector zero = Vector::Zero(base_dim);
    std::vector<const Vector*> images, texts, attrs;
    std::vector<std::string> attr_text;
    images.reserve(pairs.size());
    for (const auto& [product_id, attribute] : pairs) {
        const auto* img = store.find(image_key(product_id));
        const auto* txt = store.find(text_key(product_id));
        if (!img && !txt) throw ValidationError("no base embedding for product '" + product_id + "'");
        const auto key = attribute.text();
        const auto* a = store.find(key);
        if (!a) throw ValidationError("no base embedding for attribute '" + key + "'");
        images.push_back(img ? &img->values() : &zero);
        texts.push_back(txt ? &txt->values() : &zero);
        attrs.push_back(&a->values());
        attr_text.push_back(key);
    }
    std::sort(attr_text.begin(), attr_text.end());
    if (std::unique(attr_text.begin(), attr_text.end()) - attr_text.begin() < 2) {
        throw ValidationError("training needs at least two distinct positive attributes");
    }

    ProjectionHead head = initial_head(store.dimension(), cfg);
    const auto d = head.image.cols();
    Matrix v_img = Matrix::Zero(base_dim, d), v_txt = v_img, v_attr = v_img;

    std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    const auto bs = static_cast<std::size_t>(cfg.batch_size);

    // Batch boundaries; a trailing single pair joins the previous batch.
    std::vector<std::size_t> bounds;
    for (std::size_t b = 0; b < order.size(); b += bs) bounds.push_back(b);
    if (bounds.size() > 1 && order.size() - bounds.back() == 1) bounds.pop_back();
    bounds.push_back(order.size());

    TrainingReport local;
    local.pairs = pairs.size();
    local.batches_per_epoch = bounds.size() - 1;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(order, rng);
        double epoch_loss = 0.0;
        for (std::size_t b = 0; b + 1 < bounds.size(); ++b) {
            const auto n = static_cast<Eigen::Index>(bounds[b + 1] - bounds[b]);
            Matrix x(n, base_dim), t(n, base_dim), a(n, base_dim);
            for (Eigen::Index r = 0; r < n; ++r) {
                const auto idx = order[bounds[b] + static_cast<std::size_t>(r)];
                x.row(r) = images[idx]->transpose();
                t.row(r) = texts[idx]->transpose();
                a.row(r) = attrs[idx]->transpose();
            }
            const Matrix z = x * head.image + t * head.text;
            const Matrix y = a * head.attribute;
            std::vector<std::size_t> positives(static_cast<std::size_t>(n));
            std::iota(positives.begin(), positives.end(), 0);

            ContrastiveResult res;
            try {
                res = contrastive_loss(z, y, positives, cfg.temperature, cfg.symmetric_loss);
            } catch (const NumericError&) {
                throw TrainingDivergedError(epoch, b, cfg.learning_rate);
            }
            if (!std::isfinite(res.loss) || !res.grad_products.allFinite() || !res.grad_attributes.allFinite()) {
                throw TrainingDivergedError(epoch, b, cfg.learning_rate);
            }
            epoch_loss += res.loss * static_cast<double>(n);

            v_img = cfg.momentum * v_img + x.transpose() * res.grad_products;
            v_txt = cfg.momentum * v_txt + t.transpose() * res.grad_products;
            v_attr = cfg.momentum * v_attr + a.transpose() * res.grad_attributes;
            head.image -= cfg.learning_rate * v_img;
            head.text -= cfg.learning_rate * v_txt;
            head.attribute -= cfg.learning_rate * v_attr;
        }
        epoch_loss /= static_cast<double>(pairs.size());
        if (!std::isfinite(epoch_loss) || !head.image.allFinite() || !head.text.allFinite() ||
            !head.attribute.allFinite()) {
            throw TrainingDivergedError(epoch, bounds.size() - 2, cfg.learning_rate);
        }
        local.epoch_losses.push_back(epoch_loss);
        spdlog::info("train epoch {}/{}: loss {:.6f}", epoch + 1, cfg.epochs, epoch_loss);
    }
    if (report) *report = std::move(local);
    return head;
}

}  // namespace klp
