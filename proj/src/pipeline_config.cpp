#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "klp/io.hpp"
#include "klp/pipeline.hpp"

namespace klp::pipeline {

namespace {

struct Key {
    const char* name;
    const char* fallback;
    const char* help;
};

// clang-format off
const Key kKeys[] = {
    {"run.seed", "0", "seed for training, holdout split and hash embeddings"},
    {"run.workers", "1", "intra-stage worker threads; never changes outputs"},
    {"paths.catalog", "", "product catalog (jsonl)"},
    {"paths.annotations", "", "fixture annotations (jsonl); unused when ingest.annotation_source = client"},
    {"paths.embeddings", "", "precomputed base embeddings; empty: feature-hashed text bases"},
    {"paths.review_list", "", "attributes to drop after dedup, one category:value per line"},
    {"paths.rules", "", "implies/conflicts rules (jsonl)"},
    {"paths.query_prompt", "", "prompt template for llm query generation"},
    {"paths.annotation_prompt", "", "prompt template for client attribute extraction"},
    {"paths.output_dir", "out", "stage outputs and manifest.json"},
    {"schema.extra_categories", "", "comma-separated categories appended to the built-in schema"},
    {"ingest.annotation_source", "fixture", "fixture | client"},
    {"embed.fallback_dimension", "256", "dimension of feature-hashed bases"},
    {"vocab.min_frequency", "2", ""},
    {"vocab.dedup_threshold", "0.9", "cosine at or above which attributes merge"},
    {"vocab.dedup_cross_category", "false", ""},
    {"train.temperature", "0.07", ""},
    {"train.learning_rate", "0.01", ""},
    {"train.momentum", "0", ""},
    {"train.epochs", "5", ""},
    {"train.batch_size", "32", ""},
    {"train.dimension", "0", "shared dimension; 0 keeps the base dimension"},
    {"train.symmetric_loss", "true", ""},
    {"train.holdout_fraction", "0.2", "products held out of training for eval"},
    {"matcher.theta", "0.2", ""},
    {"matcher.weight_a", "1", "w = a + b * freq^exponent"},
    {"matcher.weight_b", "0.01", ""},
    {"matcher.weight_exponent", "0.5", ""},
    {"matcher.use_weights", "true", ""},
    {"matcher.threshold_on_raw", "false", ""},
    {"matcher.max_attributes", "0", "per-product cap; 0 means none"},
    {"querygen.min_support", "5", ""},
    {"querygen.min_size", "3", ""},
    {"querygen.max_size", "4", ""},
    {"querygen.min_score", "4", ""},
    {"querygen.generator", "fallback", "fallback | llm"},
    {"feed.min_products", "20", ""},
    {"feed.min_relevance", "0", ""},
    {"feed.require_all_attributes", "true", ""},
    {"feed.related_k", "5", ""},
    {"eval.recall_k", "1,5,10", ""},
    {"eval.precision_k", "10", ""},
    {"client.endpoint_url", "", "chat-completion endpoint"},
    {"client.model", "", ""},
    {"client.api_key_env", "KLP_API_KEY", "environment variable holding the key"},
    {"client.timeout_ms", "30000", ""},
    {"client.max_retries", "3", ""},
    {"client.max_in_flight", "4", ""},
};
// clang-format on

const Key* find_key(std::string_view name) {
    for (const auto& k : kKeys) {
        if (name == k.name) return &k;
    }
    return nullptr;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T as_integer(const std::map<std::string, std::string>& e, const char* key) {
    const auto& v = e.at(key);
    T out{};
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw ValidationError(std::string(key) + ": expected an integer, got '" + v + "'");
    }
    return out;
}

double as_double(const std::map<std::string, std::string>& e, const char* key) {
    const auto& v = e.at(key);
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size()) {
        throw ValidationError(std::string(key) + ": expected a number, got '" + v + "'");
    }
    return out;
}

bool as_bool(const std::map<std::string, std::string>& e, const char* key) {
    const auto& v = e.at(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ValidationError(std::string(key) + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> as_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::optional<std::filesystem::path> as_path(const std::map<std::string, std::string>& e, const char* key,
                                             const std::filesystem::path& base) {
    const auto& v = e.at(key);
    if (v.empty()) return std::nullopt;
    std::filesystem::path p(v);
    return p.is_absolute() ? p : base / p;
}

}  // namespace

PipelineConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ParseError(e.message(), e.line());
    }

    PipelineConfig cfg;
    for (const auto& k : kKeys) cfg.entries[k.name] = k.fallback;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) {
            throw ValidationError("key '" + section + "' must sit inside a [section]");
        }
        for (const auto& [key, value] : body) {
            const std::string name = section + "." + key;
            if (!find_key(name)) throw ValidationError("unknown config key '" + name + "'");
            cfg.entries[name] = trim(value.data());
        }
    }

    const auto& e = cfg.entries;
    cfg.seed = as_integer<std::uint64_t>(e, "run.seed");
    cfg.workers = as_integer<unsigned>(e, "run.workers");

    cfg.paths.catalog = as_path(e, "paths.catalog", base_dir).value_or("");
    cfg.paths.annotations = as_path(e, "paths.annotations", base_dir).value_or("");
    cfg.paths.embeddings = as_path(e, "paths.embeddings", base_dir);
    cfg.paths.review_list = as_path(e, "paths.review_list", base_dir);
    cfg.paths.rules = as_path(e, "paths.rules", base_dir);
    cfg.paths.query_prompt = as_path(e, "paths.query_prompt", base_dir);
    cfg.paths.annotation_prompt = as_path(e, "paths.annotation_prompt", base_dir);
    cfg.paths.output_dir = *as_path(e, "paths.output_dir", base_dir);

    cfg.extra_categories = as_list(e.at("schema.extra_categories"));
    const auto& source = e.at("ingest.annotation_source");
    if (source != "fixture" && source != "client") {
        throw ValidationError("ingest.annotation_source must be fixture or client, got '" + source + "'");
    }
    cfg.annotate_with_client = source == "client";
    cfg.fallback_dimension = as_integer<std::size_t>(e, "embed.fallback_dimension");

    cfg.vocab.min_frequency = as_integer<std::size_t>(e, "vocab.min_frequency");
    cfg.vocab.dedup_threshold = as_double(e, "vocab.dedup_threshold");
    cfg.vocab.dedup_cross_category = as_bool(e, "vocab.dedup_cross_category");
    cfg.vocab.review_list_path = cfg.paths.review_list;

    cfg.train.temperature = as_double(e, "train.temperature");
    cfg.train.learning_rate = as_double(e, "train.learning_rate");
    cfg.train.momentum = as_double(e, "train.momentum");
    cfg.train.epochs = as_integer<int>(e, "train.epochs");
    cfg.train.batch_size = as_integer<int>(e, "train.batch_size");
    cfg.train.dimension = as_integer<std::size_t>(e, "train.dimension");
    cfg.train.symmetric_loss = as_bool(e, "train.symmetric_loss");
    cfg.train.seed = cfg.seed;
    cfg.holdout_fraction = as_double(e, "train.holdout_fraction");

    cfg.matcher.theta = as_double(e, "matcher.theta");
    cfg.matcher.weights.a = as_double(e, "matcher.weight_a");
    cfg.matcher.weights.b = as_double(e, "matcher.weight_b");
    cfg.matcher.weights.exponent = as_double(e, "matcher.weight_exponent");
    cfg.matcher.use_weights = as_bool(e, "matcher.use_weights");
    cfg.matcher.threshold_on_raw = as_bool(e, "matcher.threshold_on_raw");
    if (const auto cap = as_integer<std::size_t>(e, "matcher.max_attributes"); cap > 0) {
        cfg.matcher.max_attributes_per_product = cap;
    }

    cfg.querygen.enumeration.min_support = as_integer<std::size_t>(e, "querygen.min_support");
    cfg.querygen.enumeration.min_size = as_integer<std::size_t>(e, "querygen.min_size");
    cfg.querygen.enumeration.max_size = as_integer<std::size_t>(e, "querygen.max_size");
    cfg.querygen.min_score = as_integer<int>(e, "querygen.min_score");
    const auto& generator = e.at("querygen.generator");
    if (generator != "fallback" && generator != "llm") {
        throw ValidationError("querygen.generator must be fallback or llm, got '" + generator + "'");
    }
    cfg.querygen.use_llm = generator == "llm";

    cfg.feed.min_products = as_integer<std::size_t>(e, "feed.min_products");
    cfg.feed.min_relevance = as_double(e, "feed.min_relevance");
    cfg.feed.require_all_attributes = as_bool(e, "feed.require_all_attributes");
    cfg.related_k = as_integer<std::size_t>(e, "feed.related_k");

    cfg.recall_k.clear();
    for (const auto& item : as_list(e.at("eval.recall_k"))) {
        std::size_t k = 0;
        auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), k);
        if (ec != std::errc() || ptr != item.data() + item.size() || k == 0) {
            throw ValidationError("eval.recall_k: bad entry '" + item + "'");
        }
        cfg.recall_k.push_back(k);
    }
    cfg.precision_k = as_integer<std::size_t>(e, "eval.precision_k");

    cfg.client.endpoint_url = e.at("client.endpoint_url");
    cfg.client.model_name = e.at("client.model");
    cfg.client.api_key_env_var = e.at("client.api_key_env");
    cfg.client.timeout = clients::Millis(as_integer<long>(e, "client.timeout_ms"));
    cfg.client.max_retries = as_integer<int>(e, "client.max_retries");
    cfg.client.max_in_flight = as_integer<int>(e, "client.max_in_flight");

    cfg.validate();
    return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ValidationError("config file not found: " + path.string());
    return parse_config(io::read_file(path), path.parent_path());
}

CategorySchema PipelineConfig::schema() const { return CategorySchema::with_extra(extra_categories); }

void PipelineConfig::validate() const {
    if (workers < 1) throw ValidationError("run.workers must be >= 1");
    if (fallback_dimension < 8) throw ValidationError("embed.fallback_dimension must be >= 8");
    vocab.validate();
    train.validate();
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
        throw ValidationError("train.holdout_fraction must be in [0, 1)");
    }
    matcher.validate();
    const auto& en = querygen.enumeration;
    if (en.min_support < 1) throw ValidationError("querygen.min_support must be >= 1");
    if (en.min_size < 3 || en.max_size > 4 || en.min_size > en.max_size) {
        throw ValidationError("querygen sizes must satisfy 3 <= min_size <= max_size <= 4");
    }
    if (querygen.min_score < 1 || querygen.min_score > 5) throw ValidationError("querygen.min_score must be in 1..5");
    feed.validate();
    if (related_k < 1) throw ValidationError("feed.related_k must be >= 1");
    if (precision_k < 1) throw ValidationError("eval.precision_k must be >= 1");
    if (client.max_retries < 0 || client.max_in_flight < 1 || client.timeout.count() <= 0) {
        throw ValidationError("client limits must be positive");
    }
    (void)schema();
}

std::string PipelineConfig::hash() const {
    std::string canonical;
    for (const auto& [k, v] : entries) {
        if (k == "run.workers") continue;
        canonical += k + "=" + v + "\n";
    }
    return io::sha256_hex(canonical);
}

std::string default_config_text() {
    std::string out;
    std::string section;
    for (const auto& k : kKeys) {
        const std::string name = k.name;
        const auto dot = name.find('.');
        if (name.substr(0, dot) != section) {
            if (!section.empty()) out += "\n";
            section = name.substr(0, dot);
            out += "[" + section + "]\n";
        }
        if (*k.help) out += std::string("; ") + k.help + "\n";
        out += name.substr(dot + 1) + " = " + k.fallback + "\n";
    }
    return out;
}

}  // namespace klp::pipeline
