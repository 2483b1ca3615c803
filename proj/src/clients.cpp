#include "klp/clients.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "klp/io.hpp"

namespace klp::clients {

// ---------------------------------------------------------------------------
// HttpTransport

HttpResponse HttpTransport::post(const HttpRequest& request) {
    // Split "scheme://host[:port]/path" into client base and path.
    const auto scheme_end = request.url.find("://");
    if (scheme_end == std::string::npos) {
        throw TransportError(TransportError::Kind::connection, "endpoint url lacks a scheme: " + request.url);
    }
    const auto path_start = request.url.find('/', scheme_end + 3);
    const std::string base = request.url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : request.url.substr(path_start);

    httplib::Client client(base);
    const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(request.timeout);
    const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(request.timeout - seconds);
    client.set_connection_timeout(seconds.count(), micros.count());
    client.set_read_timeout(seconds.count(), micros.count());
    client.set_write_timeout(seconds.count(), micros.count());

    httplib::Headers headers;
    for (const auto& [k, v] : request.headers) headers.emplace(k, v);
    auto result = client.Post(path, headers, request.body, "application/json");
    if (!result) {
        const auto err = result.error();
        const bool timed_out = err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read;
        throw TransportError(timed_out ? TransportError::Kind::timeout : TransportError::Kind::connection,
                             "http request failed: " + httplib::to_string(err));
    }
    return {result->status, result->body};
}

// ---------------------------------------------------------------------------
// StubTransport

std::string StubTransport::completion_body(std::string_view content) {
    json body = {{"id", "stub"},
                 {"object", "chat.completion"},
                 {"choices", json::array({{{"index", 0},
                                           {"message", {{"role", "assistant"}, {"content", content}}},
                                           {"finish_reason", "stop"}}})}};
    return body.dump();
}

StubTransport& StubTransport::reply(std::string content) {
    return respond(200, completion_body(content));
}

StubTransport& StubTransport::respond(int status, std::string body) {
    std::lock_guard lock(mutex_);
    script_.push_back({std::nullopt, {status, std::move(body)}});
    return *this;
}

StubTransport& StubTransport::fail(TransportError::Kind kind) {
    std::lock_guard lock(mutex_);
    script_.push_back({kind, {}});
    return *this;
}

StubTransport& StubTransport::otherwise(Step step) {
    std::lock_guard lock(mutex_);
    fallback_ = std::move(step);
    return *this;
}

HttpResponse StubTransport::post(const HttpRequest& request) {
    Step step;
    {
        std::lock_guard lock(mutex_);
        requests_.push_back(request);
        if (!script_.empty()) {
            step = std::move(script_.front());
            script_.pop_front();
        } else if (fallback_) {
            step = *fallback_;
        } else {
            throw TransportError(TransportError::Kind::connection, "stub script exhausted");
        }
    }
    if (step.failure) {
        throw TransportError(*step.failure, *step.failure == TransportError::Kind::timeout
                                                ? "stub timeout"
                                                : "stub connection failure");
    }
    return step.response;
}

std::vector<HttpRequest> StubTransport::requests() const {
    std::lock_guard lock(mutex_);
    return requests_;
}

std::size_t StubTransport::calls() const {
    std::lock_guard lock(mutex_);
    return requests_.size();
}

HttpResponse CallbackTransport::post(const HttpRequest& request) {
    return {200, StubTransport::completion_body(handler_(json::parse(request.body)))};
}

// ---------------------------------------------------------------------------
// ChatClient

Millis backoff_delay(const ClientConfig& cfg, int retry) {
    auto delay = cfg.initial_backoff;
    for (int i = 0; i < retry && delay < cfg.max_backoff; ++i) delay *= 2;
    return std::min(delay, cfg.max_backoff);
}

std::string redact(std::string text, std::string_view secret) {
    if (secret.empty()) return text;
    for (auto pos = text.find(secret); pos != std::string::npos; pos = text.find(secret, pos + 3)) {
        text.replace(pos, secret.size(), "***");
    }
    return text;
}

ChatClient::ChatClient(ClientConfig cfg, std::shared_ptr<Transport> transport, Sleeper sleeper)
    : cfg_(std::move(cfg)),
      transport_(std::move(transport)),
      sleeper_(std::move(sleeper)),
      in_flight_(std::make_shared<std::counting_semaphore<>>(std::max(1, cfg_.max_in_flight))) {
    if (!transport_) throw ValidationError("chat client requires a transport");
    if (cfg_.max_retries < 0) throw ValidationError("max_retries must be >= 0");
    if (!sleeper_) sleeper_ = [](Millis d) { std::this_thread::sleep_for(d); };
}

json ChatClient::build_request(const std::string& model, const std::vector<ChatMessage>& messages,
                               const std::optional<ImagePayload>& image) {
    json msgs = json::array();
    for (std::size_t i = 0; i < messages.size(); ++i) {
        const auto& m = messages[i];
        const bool attach = image && i + 1 == messages.size() && m.role == "user";
        if (attach) {
            msgs.push_back({{"role", m.role},
                            {"content", json::array({{{"type", "text"}, {"text", m.content}},
                                                     {{"type", "image_url"}, {"image_url", {{"url", image->url}}}}})}});
        } else {
            msgs.push_back({{"role", m.role}, {"content", m.content}});
        }
    }
    return {{"model", model}, {"messages", msgs}};
}

std::string ChatClient::extract_content(const std::string& body) {
    json parsed;
    try {
        parsed = json::parse(body);
    } catch (const json::parse_error&) {
        throw ResponseParseError("response body is not JSON", body);
    }
    if (!parsed.is_object() || !parsed.contains("choices") || !parsed["choices"].is_array() ||
        parsed["choices"].empty()) {
        throw ResponseParseError("response missing choices", body);
    }
    const auto& choice = parsed["choices"][0];
    if (!choice.contains("message") || !choice["message"].is_object() ||
        !choice["message"].contains("content")) {
        throw ResponseParseError("response missing message content", body);
    }
    const auto& content = choice["message"]["content"];
    if (content.is_string()) return content.get<std::string>();
    if (content.is_array()) {
        std::string text;
        for (const auto& part : content) {
            if (part.is_object() && part.value("type", "") == "text" && part.contains("text")) {
                text += part["text"].get<std::string>();
            }
        }
        return text;
    }
    throw ResponseParseError("message content has unexpected type", body);
}

std::string ChatClient::chat_complete(const std::string& prompt, const std::optional<ImagePayload>& image) const {
    return chat_complete(std::vector<ChatMessage>{{"user", prompt}}, image);
}

std::string ChatClient::chat_complete(const std::vector<ChatMessage>& messages,
                                      const std::optional<ImagePayload>& image) const {
    const auto id = next_id_++;
    std::string secret;
    if (const char* env = std::getenv(cfg_.api_key_env_var.c_str())) secret = env;

    HttpRequest request;
    request.url = cfg_.endpoint_url;
    request.body = build_request(cfg_.model_name, messages, image).dump();
    request.timeout = cfg_.timeout;
    request.headers.emplace_back("Content-Type", "application/json");
    if (!secret.empty()) request.headers.emplace_back("Authorization", "Bearer " + secret);

    spdlog::debug("chat request #{} -> {}: {}", id, cfg_.endpoint_url, redact(request.body, secret));

    const int attempts = cfg_.max_retries + 1;
    std::string last_failure;
    bool last_was_timeout = false;
    for (int attempt = 0; attempt < attempts; ++attempt) {
        if (attempt > 0) sleeper_(backoff_delay(cfg_, attempt - 1));
        HttpResponse response;
        try {
            in_flight_->acquire();
            struct Release {
                std::counting_semaphore<>& s;
                ~Release() { s.release(); }
            } release{*in_flight_};
            response = transport_->post(request);
        } catch (const TransportError& e) {
            last_was_timeout = e.kind() == TransportError::Kind::timeout;
            last_failure = redact(e.what(), secret);
            spdlog::warn("chat request #{} attempt {}/{} failed: {}", id, attempt + 1, attempts, last_failure);
            continue;
        }
        const auto body = redact(response.body, secret);
        if (response.status == 401 || response.status == 403) {
            throw AuthenticationError("authentication failed (HTTP " + std::to_string(response.status) +
                                      ") for request #" + std::to_string(id));
        }
        if (response.status == 429 || response.status >= 500) {
            last_was_timeout = false;
            last_failure = "HTTP " + std::to_string(response.status);
            spdlog::warn("chat request #{} attempt {}/{} got {}", id, attempt + 1, attempts, last_failure);
            continue;
        }
        if (response.status >= 400) {
            throw RequestError(response.status, "request #" + std::to_string(id) + " rejected with HTTP " +
                                                    std::to_string(response.status) + ": " + body);
        }
        spdlog::debug("chat response #{}: {}", id, body);
        try {
            return extract_content(response.body);
        } catch (const ResponseParseError& e) {
            throw ResponseParseError(e.what(), body);
        }
    }
    if (last_was_timeout) {
        throw TimeoutError("request #" + std::to_string(id) + " timed out after " + std::to_string(attempts) +
                           " attempts");
    }
    throw RetriesExhaustedError(attempts, "request #" + std::to_string(id) + " failed after " +
                                              std::to_string(attempts) + " attempts: " + last_failure);
}

// ---------------------------------------------------------------------------
// Prompt templates

std::string PromptTemplate::render(const std::map<std::string, std::string>& bindings) const {
    std::string out;
    std::size_t pos = 0;
    while (true) {
        const auto open = user_template.find("{{", pos);
        if (open == std::string::npos) {
            out.append(user_template, pos);
            break;
        }
        const auto close = user_template.find("}}", open + 2);
        if (close == std::string::npos) throw ValidationError("unterminated placeholder in prompt template");
        out.append(user_template, pos, open - pos);
        const auto name = user_template.substr(open + 2, close - open - 2);
        auto it = bindings.find(name);
        if (it == bindings.end()) throw ValidationError("unbound placeholder '{{" + name + "}}'");
        out += it->second;
        pos = close + 2;
    }
    if (out.find_first_not_of(" \t\r\n") == std::string::npos) {
        throw ValidationError("rendered prompt is empty");
    }
    return out;
}

std::vector<ChatMessage> PromptTemplate::messages(const std::map<std::string, std::string>& bindings) const {
    std::vector<ChatMessage> out;
    if (!system_text.empty()) out.push_back({"system", system_text});
    for (const auto& [input, output] : few_shot_examples) {
        out.push_back({"user", input});
        out.push_back({"assistant", output});
    }
    out.push_back({"user", render(bindings)});
    return out;
}

namespace {

std::string trim_block(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

PromptTemplate parse_prompt_template(std::string_view text) {
    PromptTemplate tpl;
    enum class Section { none, system, user, example };
    Section section = Section::none;
    std::string system, user, ex_in, ex_out;
    bool in_output = false;
    bool saw_header = false;

    auto flush_example = [&] {
        if (section == Section::example) {
            tpl.few_shot_examples.emplace_back(trim_block(ex_in), trim_block(ex_out));
        }
        ex_in.clear();
        ex_out.clear();
        in_output = false;
    };

    std::istringstream in{std::string(text)};
    std::string line;
    std::string untitled;
    while (std::getline(in, line)) {
        const auto t = trim_block(line);
        if (t == "[system]" || t == "[user]" || t == "[example]") {
            flush_example();
            saw_header = true;
            section = t == "[system]" ? Section::system : t == "[user]" ? Section::user : Section::example;
            continue;
        }
        switch (section) {
            case Section::none: untitled += line + '\n'; break;
            case Section::system: system += line + '\n'; break;
            case Section::user: user += line + '\n'; break;
            case Section::example:
                if (t.rfind("input:", 0) == 0) {
                    in_output = false;
                    ex_in += t.substr(6) + '\n';
                } else if (t.rfind("output:", 0) == 0) {
                    in_output = true;
                    ex_out += t.substr(7) + '\n';
                } else {
                    (in_output ? ex_out : ex_in) += line + '\n';
                }
                break;
        }
    }
    flush_example();
    tpl.system_text = trim_block(system);
    tpl.user_template = trim_block(saw_header ? user : untitled);
    if (tpl.user_template.empty()) throw ValidationError("prompt template has no user text");
    return tpl;
}

PromptTemplate load_prompt_template(const std::string& path) {
    return parse_prompt_template(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Structured parsing

std::optional<json> extract_first_object(std::string_view text) {
    for (auto start = text.find('{'); start != std::string_view::npos; start = text.find('{', start + 1)) {
        int depth = 0;
        bool in_string = false;
        bool escaped = false;
        for (std::size_t i = start; i < text.size(); ++i) {
            const char c = text[i];
            if (in_string) {
                if (escaped) escaped = false;
                else if (c == '\\') escaped = true;
                else if (c == '"') in_string = false;
                continue;
            }
            if (c == '"') in_string = true;
            else if (c == '{') ++depth;
            else if (c == '}' && --depth == 0) {
                auto parsed = json::parse(text.substr(start, i - start + 1), nullptr, false);
                if (!parsed.is_discarded() && parsed.is_object()) return parsed;
                break;
            }
        }
    }
    return std::nullopt;
}

json parse_structured(std::string_view response, const Schema& schema) {
    const std::string payload(response);
    auto obj = extract_first_object(response);
    if (!obj) throw ResponseParseError("no JSON object found in response", payload);

    json out = json::object();
    for (const auto& field : schema) {
        auto it = obj->find(field.name);
        if (it == obj->end() || it->is_null()) {
            if (field.required) throw ResponseParseError("missing required field '" + field.name + "'", payload);
            continue;
        }
        const json& v = *it;
        auto type_error = [&](const char* expected) {
            return ResponseParseError("field '" + field.name + "' must be " + expected + ", got " + v.dump(),
                                      payload);
        };
        switch (field.type) {
            case FieldType::boolean:
                if (!v.is_boolean()) throw type_error("a boolean");
                break;
            case FieldType::integer:
                if (!v.is_number_integer() &&
                    !(v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<long long>(v.get<double>())))) {
                    throw type_error("an integer");
                }
                break;
            case FieldType::number:
                if (!v.is_number()) throw type_error("a number");
                break;
            case FieldType::string:
                if (!v.is_string()) throw type_error("a string");
                break;
            case FieldType::string_list:
                if (!v.is_array() || !std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_string(); })) {
                    throw type_error("a list of strings");
                }
                break;
        }
        if (v.is_number() && (field.min || field.max)) {
            const double x = v.get<double>();
            if ((field.min && x < *field.min) || (field.max && x > *field.max)) {
                throw ResponseParseError("field '" + field.name + "' out of range: " + v.dump(), payload);
            }
        }
        out[field.name] = field.type == FieldType::integer ? json(static_cast<long long>(v.get<double>())) : v;
    }
    return out;
}

}  // namespace klp::clients
