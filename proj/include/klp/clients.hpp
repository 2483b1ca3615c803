#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "klp/error.hpp"

namespace klp::clients {

using json = nlohmann::json;
using Millis = std::chrono::milliseconds;

struct ClientConfig {
    std::string endpoint_url;
    // Name of the environment variable holding the API key. The key itself is
    // never stored in configuration.
    std::string api_key_env_var = "KLP_API_KEY";
    std::string model_name;
    Millis timeout{30000};
    int max_retries = 3;
    int max_in_flight = 4;
    Millis initial_backoff{500};
    Millis max_backoff{8000};
};

// ---------------------------------------------------------------------------
// Errors

class TransportError : public Error {
public:
    enum class Kind { connection, timeout };
    TransportError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

class TimeoutError : public Error {
public:
    using Error::Error;
};

class AuthenticationError : public Error {
public:
    using Error::Error;
};

/// Non-retryable 4xx other than authentication.
class RequestError : public Error {
public:
    RequestError(int status, const std::string& what) : Error(what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

class RetriesExhaustedError : public Error {
public:
    RetriesExhaustedError(int attempts, const std::string& what) : Error(what), attempts_(attempts) {}
    int attempts() const noexcept { return attempts_; }

private:
    int attempts_;
};

/// A reply that could not be turned into the expected structure. The raw
/// payload is kept for auditing.
class ResponseParseError : public Error {
public:
    ResponseParseError(const std::string& what, std::string payload)
        : Error(what), payload_(std::move(payload)) {}
    const std::string& payload() const noexcept { return payload_; }

private:
    std::string payload_;
};

// ---------------------------------------------------------------------------
// Transport

struct HttpRequest {
    std::string url;
    std::string body;
    std::vector<std::pair<std::string, std::string>> headers;
    Millis timeout{30000};
};

struct HttpResponse {
    int status = 200;
    std::string body;
};

class Transport {
public:
    virtual ~Transport() = default;
    /// Throws TransportError when no HTTP response was obtained.
    virtual HttpResponse post(const HttpRequest& request) = 0;
};

/// Plain HTTP(S) transport.
class HttpTransport final : public Transport {
public:
    HttpResponse post(const HttpRequest& request) override;
};

/// Scripted transport for offline runs and tests. Steps are consumed in order;
/// once the script is empty the fallback step (if any) repeats forever.
class StubTransport final : public Transport {
public:
    struct Step {
        std::optional<TransportError::Kind> failure;
        HttpResponse response;
    };

    StubTransport& reply(std::string content);
    StubTransport& respond(int status, std::string body);
    StubTransport& fail(TransportError::Kind kind = TransportError::Kind::connection);
    StubTransport& otherwise(Step step);

    /// Wraps `content` into a chat-completion response body.
    static std::string completion_body(std::string_view content);

    HttpResponse post(const HttpRequest& request) override;

    std::vector<HttpRequest> requests() const;
    std::size_t calls() const;

private:
    mutable std::mutex mutex_;
    std::deque<Step> script_;
    std::optional<Step> fallback_;
    std::vector<HttpRequest> requests_;
};

/// Stub that computes each reply from the request body. Used when replies
/// depend on the prompt (e.g. concurrent generation runs).
class CallbackTransport final : public Transport {
public:
    using Handler = std::function<std::string(const json& request_body)>;
    explicit CallbackTransport(Handler handler) : handler_(std::move(handler)) {}
    HttpResponse post(const HttpRequest& request) override;

private:
    Handler handler_;
};

// ---------------------------------------------------------------------------
// Chat client

struct ChatMessage {
    std::string role;
    std::string content;
};

struct ImagePayload {
    std::string url;  // file path, http(s) URL or data: URI
};

using Sleeper = std::function<void(Millis)>;

/// Delay before retry number `retry` (0-based): initial * 2^retry, capped.
Millis backoff_delay(const ClientConfig& cfg, int retry);

/// Replaces every occurrence of `secret` in `text` with "***".
std::string redact(std::string text, std::string_view secret);

class ChatClient {
public:
    ChatClient(ClientConfig cfg, std::shared_ptr<Transport> transport, Sleeper sleeper = {});

    /// Returns the first choice's message content. Transport failures, 429 and
    /// 5xx replies are retried with exponential backoff up to max_retries.
    std::string chat_complete(const std::vector<ChatMessage>& messages,
                              const std::optional<ImagePayload>& image = std::nullopt) const;
    std::string chat_complete(const std::string& prompt,
                              const std::optional<ImagePayload>& image = std::nullopt) const;

    const ClientConfig& config() const noexcept { return cfg_; }

    /// Request body in chat-completion wire format.
    static json build_request(const std::string& model, const std::vector<ChatMessage>& messages,
                              const std::optional<ImagePayload>& image);
    /// Extracts choices[0].message.content; throws ResponseParseError.
    static std::string extract_content(const std::string& body);

private:
    ClientConfig cfg_;
    std::shared_ptr<Transport> transport_;
    Sleeper sleeper_;
    std::shared_ptr<std::counting_semaphore<>> in_flight_;
    mutable std::atomic<std::uint64_t> next_id_{1};
};

// ---------------------------------------------------------------------------
// Prompt templates

struct PromptTemplate {
    std::string system_text;
    std::string user_template;
    std::vector<std::pair<std::string, std::string>> few_shot_examples;

    /// Substitutes every `{{name}}` placeholder; throws ValidationError on an
    /// unbound placeholder or an empty result.
    std::string render(const std::map<std::string, std::string>& bindings) const;
    std::vector<ChatMessage> messages(const std::map<std::string, std::string>& bindings) const;
};

/// Template files are plain text. Optional `[system]`, `[user]` and
/// `[example]` section headers split the file; inside an example section the
/// lines after `input:` and `output:` form the exemplar pair. A file without
/// headers is taken as the user template; otherwise text before the first
/// header is ignored.
PromptTemplate parse_prompt_template(std::string_view text);
PromptTemplate load_prompt_template(const std::string& path);

// ---------------------------------------------------------------------------
// Structured response parsing

enum class FieldType { boolean, integer, number, string, string_list };

struct FieldSpec {
    std::string name;
    FieldType type = FieldType::string;
    bool required = true;
    std::optional<double> min;
    std::optional<double> max;
};

using Schema = std::vector<FieldSpec>;

/// First balanced `{...}` block in `text` that parses as a JSON object.
std::optional<json> extract_first_object(std::string_view text);

/// Lenient extraction (surrounding prose and code fences are tolerated)
/// followed by strict validation of the schema's fields. Unknown fields are
/// dropped from the result.
json parse_structured(std::string_view response, const Schema& schema);

}  // namespace klp::clients
