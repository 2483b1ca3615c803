#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "klp/clients.hpp"
#include "klp/embed.hpp"
#include "klp/error.hpp"
#include "klp/feedgen.hpp"
#include "klp/matcher.hpp"
#include "klp/querygen.hpp"
#include "klp/vocab.hpp"

namespace klp::pipeline {

inline constexpr const char* kStages[] = {"ingest", "curate", "train", "match", "querygen", "feedgen", "eval", "related"};

bool is_stage(std::string_view name);

struct Paths {
    std::filesystem::path catalog;
    std::filesystem::path annotations;
    std::optional<std::filesystem::path> embeddings;  // absent: hash_embed bases
    std::optional<std::filesystem::path> review_list;
    std::optional<std::filesystem::path> rules;
    std::optional<std::filesystem::path> query_prompt;
    std::optional<std::filesystem::path> annotation_prompt;
    std::filesystem::path output_dir;
};

struct QuerygenSettings {
    EnumerationConfig enumeration;
    int min_score = 4;
    bool use_llm = false;
};

struct PipelineConfig {
    Paths paths;
    std::vector<std::string> extra_categories;
    bool annotate_with_client = false;  // ingest: call the VLM instead of reading annotations
    std::size_t fallback_dimension = 256;
    VocabConfig vocab;
    TrainerConfig train;
    double holdout_fraction = 0.2;
    MatcherConfig matcher;
    QuerygenSettings querygen;
    FeedConfig feed;
    std::size_t related_k = 5;
    std::vector<std::size_t> recall_k = {1, 5, 10};
    std::size_t precision_k = 10;
    clients::ClientConfig client;
    std::uint64_t seed = 0;
    unsigned workers = 1;

    /// Every key=value pair (section.key), the canonical form hashed into
    /// the manifest.
    std::map<std::string, std::string> entries;

    CategorySchema schema() const;
    /// Range and consistency checks; path existence is checked per stage.
    void validate() const;
    /// sha256 over the canonical entries, run.workers excluded.
    std::string hash() const;
};

/// Parses a sectioned key=value file. Relative paths resolve against
/// `base_dir`. Unknown keys and malformed values throw ValidationError.
PipelineConfig parse_config(const std::string& text, const std::filesystem::path& base_dir);
PipelineConfig load_config(const std::filesystem::path& path);
/// The config file with every default filled in.
std::string default_config_text();

class MissingUpstreamError : public ValidationError {
public:
    MissingUpstreamError(const std::string& stage, const std::string& upstream, const std::string& file);
    const std::string& upstream() const noexcept { return upstream_; }

private:
    std::string upstream_;
};

/// Wraps a stage-internal failure with the stage name; `exit_code` follows
/// the CLI contract (1 validation, 2 runtime).
class StageError : public Error {
public:
    StageError(const std::string& stage, const std::string& what, int exit_code);
    const std::string& stage() const noexcept { return stage_; }
    int exit_code() const noexcept { return exit_code_; }

private:
    std::string stage_;
    int exit_code_;
};

struct RunOptions {
    bool force = false;
    std::shared_ptr<clients::Transport> transport;  // default: HttpTransport
    clients::Sleeper sleeper;
};

struct StageResult {
    std::string stage;
    bool skipped = false;  // inputs and outputs unchanged since the last run
    std::map<std::string, std::size_t> rows;
};

/// Runs one stage (or "all" in order) and rewrites manifest.json.
std::vector<StageResult> run_stage(const std::string& stage, const PipelineConfig& cfg, const RunOptions& opts = {});

/// manifest.json of the output directory; empty object when absent.
nlohmann::json read_manifest(const std::filesystem::path& output_dir);

/// Deterministic holdout membership by hashed product id.
bool in_holdout(const std::string& product_id, double fraction, std::uint64_t seed);

}  // namespace klp::pipeline
