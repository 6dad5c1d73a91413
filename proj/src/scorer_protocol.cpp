#include "charforge/encoders.hpp"
#include "charforge/errors.hpp"

#include <json.hpp>

#include <bit>
#include <csignal>
#include <cstring>
#include <sys/wait.h>
#include <unistd.h>

namespace charforge {

namespace {

constexpr std::string_view kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int decode_char(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
}

void write_all(int fd, const std::string& data) {
    size_t off = 0;
    while (off < data.size()) {
        const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
        if (n < 0) {
            if (errno == EINTR) {
                continue;
            }
            throw IoError(std::string("scorer write failed: ") + std::strerror(errno));
        }
        off += static_cast<size_t>(n);
    }
}

}  // namespace

std::string base64_encode(std::span<const unsigned char> bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const uint32_t v = (uint32_t{bytes[i]} << 16) | (uint32_t{bytes[i + 1]} << 8) | bytes[i + 2];
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += kAlphabet[v & 63];
    }
    const size_t rest = bytes.size() - i;
    if (rest == 1) {
        const uint32_t v = uint32_t{bytes[i]} << 16;
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += "==";
    } else if (rest == 2) {
        const uint32_t v = (uint32_t{bytes[i]} << 16) | (uint32_t{bytes[i + 1]} << 8);
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

std::vector<unsigned char> base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) {
        throw ParseError("base64 length is not a multiple of 4");
    }
    std::vector<unsigned char> out;
    out.reserve(text.size() / 4 * 3);
    for (size_t i = 0; i < text.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = text[i + static_cast<size_t>(k)];
            if (c == '=' && i + 4 == text.size() && k >= 2) {
                v[k] = 0;
                ++pad;
            } else {
                v[k] = decode_char(c);
                if (v[k] < 0 || pad > 0) {
                    throw ParseError("invalid base64 character");
                }
            }
        }
        const uint32_t w = (static_cast<uint32_t>(v[0]) << 18) | (static_cast<uint32_t>(v[1]) << 12) |
                           (static_cast<uint32_t>(v[2]) << 6) | static_cast<uint32_t>(v[3]);
        out.push_back(static_cast<unsigned char>(w >> 16));
        if (pad < 2) out.push_back(static_cast<unsigned char>(w >> 8));
        if (pad < 1) out.push_back(static_cast<unsigned char>(w));
    }
    return out;
}

std::string image_to_base64(const ToyImage& image) {
    std::vector<unsigned char> bytes;
    bytes.reserve(ToyImage::kSize * 4);
    for (float v : image.pixels()) {
        const uint32_t bits = std::bit_cast<uint32_t>(v);
        for (int k = 0; k < 4; ++k) {
            bytes.push_back(static_cast<unsigned char>(bits >> (8 * k)));
        }
    }
    return base64_encode(bytes);
}

ToyImage image_from_base64(std::string_view text) {
    const auto bytes = base64_decode(text);
    if (bytes.size() != ToyImage::kSize * 4) {
        throw ParseError("image payload must be 3072 bytes of raw f32");
    }
    std::vector<double> values(ToyImage::kSize);
    for (size_t i = 0; i < values.size(); ++i) {
        uint32_t bits = 0;
        for (int k = 0; k < 4; ++k) {
            bits |= uint32_t{bytes[4 * i + static_cast<size_t>(k)]} << (8 * k);
        }
        values[i] = std::bit_cast<float>(bits);
    }
    return ToyImage::from_values(values);
}

ProtocolScorer::ProtocolScorer(const std::string& command) {
    std::signal(SIGPIPE, SIG_IGN);
    int in_pipe[2];
    int out_pipe[2];
    if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0) {
        throw IoError("cannot create scorer pipes");
    }
    const pid_t pid = ::fork();
    if (pid < 0) {
        throw IoError("cannot fork scorer process");
    }
    if (pid == 0) {
        ::dup2(in_pipe[0], STDIN_FILENO);
        ::dup2(out_pipe[1], STDOUT_FILENO);
        ::close(in_pipe[0]);
        ::close(in_pipe[1]);
        ::close(out_pipe[0]);
        ::close(out_pipe[1]);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    pid_ = pid;
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
}

ProtocolScorer::~ProtocolScorer() {
    if (to_child_ >= 0) {
        ::close(to_child_);
    }
    if (from_child_ >= 0) {
        ::close(from_child_);
    }
    if (pid_ > 0) {
        int status = 0;
        ::waitpid(pid_, &status, 0);
    }
}

std::string ProtocolScorer::request(const std::string& line) const {
    std::lock_guard lock(mutex_);
    write_all(to_child_, line + "\n");
    while (true) {
        const auto nl = buffer_.find('\n');
        if (nl != std::string::npos) {
            std::string reply = buffer_.substr(0, nl);
            buffer_.erase(0, nl + 1);
            return reply;
        }
        char chunk[4096];
        const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
        if (n < 0 && errno == EINTR) {
            continue;
        }
        if (n <= 0) {
            throw IoError("scorer process closed its output");
        }
        buffer_.append(chunk, static_cast<size_t>(n));
    }
}

EmbedVector ProtocolScorer::embed(const ToyImage& image, EncoderKind kind) const {
    const nlohmann::json req = {{"op", "embed"}, {"kind", to_string(kind)}, {"image", image_to_base64(image)}};
    nlohmann::json reply;
    try {
        reply = nlohmann::json::parse(request(req.dump()));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("malformed scorer reply: ") + e.what());
    }
    if (!reply.contains("values") || !reply["values"].is_array() || reply["values"].size() < kEmbedDim) {
        throw ParseError("scorer reply must carry at least 64 values");
    }
    EmbedVector out;
    double norm = 0.0;
    for (const auto& v : reply["values"]) {
        if (!v.is_number()) {
            throw ParseError("scorer reply values must be numbers");
        }
        out.values.push_back(v.get<double>());
        norm += out.values.back() * out.values.back();
    }
    norm = std::sqrt(norm);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
        throw ParseError("scorer returned a zero or non-finite embedding");
    }
    for (double& v : out.values) {
        v /= norm;
    }
    return out;
}

double ProtocolScorer::perceptual_distance(const ToyImage& a, const ToyImage& b) const {
    const nlohmann::json req = {{"op", "lpips"}, {"a", image_to_base64(a)}, {"b", image_to_base64(b)}};
    nlohmann::json reply;
    try {
        reply = nlohmann::json::parse(request(req.dump()));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("malformed scorer reply: ") + e.what());
    }
    if (!reply.contains("value") || !reply["value"].is_number()) {
        throw ParseError("scorer reply must carry a numeric 'value'");
    }
    return reply["value"].get<double>();
}

}  // namespace charforge
