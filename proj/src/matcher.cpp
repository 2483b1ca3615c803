#include "klp/matcher.hpp"

#include <algorithm>
#include <cmath>

#include "klp/error.hpp"
#include "klp/io.hpp"

namespace klp {

using nlohmann::json;

void WeightConfig::validate() const {
    if (!(a >= 0.0) || !(b >= 0.0)) throw ValidationError("weight coefficients a and b must be >= 0");
    if (!std::isfinite(exponent)) throw ValidationError("weight exponent must be finite");
}

double attribute_weight(std::size_t frequency, const WeightConfig& cfg) {
    const double f = static_cast<double>(frequency);
    // For the square-root exponent use sqrt and divide by 1/b: with b = 0.01
    // this is bit-identical to 1 + sqrt(freq) / 100.
    const double scaled = cfg.exponent == 0.5 ? std::sqrt(f) : std::pow(f, cfg.exponent);
    if (cfg.b == 0.0) return cfg.a;
    return cfg.a + scaled / (1.0 / cfg.b);
}

void MatcherConfig::validate() const {
    if (!std::isfinite(theta)) throw ValidationError("theta must be finite");
    weights.validate();
    if (max_attributes_per_product && *max_attributes_per_product == 0) {
        throw ValidationError("max_attributes_per_product must be >= 1 when set");
    }
}

bool ranks_before(const ScoredAttribute& x, const ScoredAttribute& y) {
    if (x.adjusted != y.adjusted) return x.adjusted > y.adjusted;
    return x.attribute < y.attribute;
}

const ScoredAttribute* AttributeAssignment::find(const Attribute& a) const {
    for (const auto& s : matched) {
        if (s.attribute == a) return &s;
    }
    return nullptr;
}

ScoreCache::ScoreCache(std::vector<Entry> entries) : entries_(std::move(entries)) {
    std::sort(entries_.begin(), entries_.end(), [](const Entry& x, const Entry& y) { return x.attribute < y.attribute; });
    if (!entries_.empty()) dimension_ = entries_.front().embedding.dimension();
    matrix_.resize(static_cast<Eigen::Index>(entries_.size()), static_cast<Eigen::Index>(dimension_));
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].embedding.dimension() != dimension_) throw ValidationError("score cache dimension mismatch");
        if (!index_.emplace(entries_[i].attribute, i).second) {
            throw ValidationError("duplicate score cache entry '" + entries_[i].attribute.text() + "'");
        }
        matrix_.row(static_cast<Eigen::Index>(i)) = entries_[i].embedding.values().transpose();
    }
}

const ScoreCache::Entry* ScoreCache::find(const Attribute& a) const {
    auto it = index_.find(a);
    return it == index_.end() ? nullptr : &entries_[it->second];
}

ScoreCache build_score_cache(const AttributeVocabulary& vocab, const ProjectionHead& head,
                             const EmbeddingStore& store, const WeightConfig& weights, bool use_weights,
                             const AttributeEmbedder& fallback) {
    weights.validate();
    std::vector<ScoreCache::Entry> entries;
    entries.reserve(vocab.retained.size());
    for (const auto& attr : vocab.retained) {
        const auto* base = store.find(attr.text());
        EmbeddingVector fallback_base;
        if (!base) {
            if (!fallback) throw ValidationError("no embedding for attribute '" + attr.text() + "'");
            fallback_base = fallback(attr);
            base = &fallback_base;
        }
        if (base->dimension() != head.base_dimension()) {
            throw ValidationError("attribute '" + attr.text() + "' embedding does not match head base dimension");
        }
        const double w = use_weights ? attribute_weight(vocab.frequencies.count(attr), weights) : 1.0;
        entries.push_back({attr, attribute_embedding(head, *base), w});
    }
    return ScoreCache(std::move(entries));
}

std::vector<ScoredAttribute> score_product(const EmbeddingVector& product, const ScoreCache& cache) {
    std::vector<ScoredAttribute> out;
    if (cache.empty()) return out;
    if (product.dimension() != cache.dimension()) throw NumericError("score_product: dimension mismatch");
    const double norm = product.norm();
    if (norm == 0.0) throw NumericError("score_product: zero product embedding");

    out.reserve(cache.size());
    for (std::size_t i = 0; i < cache.size(); ++i) {
        const auto& e = cache.entries()[i];
        // Cache embeddings are unit vectors; only the product needs dividing.
        const double raw = std::clamp(e.embedding.values().dot(product.values()) / norm, -1.0, 1.0);
        out.push_back({e.attribute, raw, e.weight, e.weight * raw});
    }
    std::sort(out.begin(), out.end(), ranks_before);
    return out;
}

AttributeAssignment assign_attributes(const std::string& product_id, const std::vector<ScoredAttribute>& scored,
                                      const MatcherConfig& cfg) {
    AttributeAssignment out{product_id, {}};
    for (const auto& s : scored) {
        const double score = cfg.threshold_on_raw ? s.raw_sim : s.adjusted;
        if (score >= cfg.theta) out.matched.push_back(s);
    }
    // Input order is the ranking; keep it after filtering.
    std::sort(out.matched.begin(), out.matched.end(), ranks_before);
    if (cfg.max_attributes_per_product && out.matched.size() > *cfg.max_attributes_per_product) {
        out.matched.resize(*cfg.max_attributes_per_product);
    }
    return out;
}

json to_json(const AttributeAssignment& a) {
    json matched = json::array();
    for (const auto& s : a.matched) {
        matched.push_back({{"category", s.attribute.category},
                           {"value", s.attribute.value},
                           {"raw_sim", s.raw_sim},
                           {"weight", s.weight},
                           {"adjusted", s.adjusted}});
    }
    return {{"product_id", a.product_id}, {"matched", matched}};
}

AttributeAssignment assignment_from_json(const json& j, const CategorySchema& schema, std::size_t line) {
    AttributeAssignment a;
    a.product_id = io::require_string(j, "product_id", line);
    const auto& matched = io::require_field(j, "matched", line);
    if (!matched.is_array()) throw ParseError("field 'matched' must be an array", line);
    for (const auto& m : matched) {
        ScoredAttribute s;
        s.attribute = attribute_from_json(m, schema, line);
        s.raw_sim = io::require_field(m, "raw_sim", line).get<double>();
        s.weight = io::require_field(m, "weight", line).get<double>();
        s.adjusted = io::require_field(m, "adjusted", line).get<double>();
        a.matched.push_back(std::move(s));
    }
    return a;
}

std::string serialize_assignments(const std::vector<AttributeAssignment>& assignments) {
    std::string out;
    for (const auto& a : assignments) out += to_json(a).dump() + '\n';
    return out;
}

std::vector<AttributeAssignment> load_assignments(const std::filesystem::path& path, const CategorySchema& schema) {
    std::vector<AttributeAssignment> out;
    io::for_each_jsonl(path, [&](const json& record, std::size_t line) {
        out.push_back(assignment_from_json(record, schema, line));
    });
    return out;
}

}  // namespace klp
