#include "mpt/model_config.hpp"

#include <sstream>

#include "mpt/errors.hpp"

namespace mpt {

RoutingPattern RoutingPattern::from_letter(char c) {
    switch (c) {
        case 'a': return {Tap::ModuleOutput, Inject::PreResidual};
        case 'b': return {Tap::ModuleOutput, Inject::PostResidual};
        case 'c': return {Tap::AttentionOutput, Inject::PreResidual};
        case 'd': return {Tap::AttentionOutput, Inject::PostResidual};
        default: throw ConfigError(std::string("unknown routing pattern '") + c + "'");
    }
}

bool is_bijection(const std::vector<int>& perm, int n, std::string* issues) {
    std::vector<int> count(static_cast<std::size_t>(n), 0);
    bool ok = static_cast<int>(perm.size()) == n;
    if (!ok && issues) *issues = "length " + std::to_string(perm.size()) + " != " + std::to_string(n);
    for (int v : perm) {
        if (v < 0 || v >= n) {
            ok = false;
            if (issues) *issues += " value " + std::to_string(v) + " out of range;";
            continue;
        }
        if (++count[static_cast<std::size_t>(v)] == 2) {
            ok = false;
            if (issues) *issues += " duplicate " + std::to_string(v) + ";";
        }
    }
    return ok;
}

std::string perm_to_string(const std::vector<int>& perm) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (i) os << ",";
        os << perm[i];
    }
    os << "]";
    return os.str();
}

std::vector<int> perm_from_string(const std::string& s) {
    std::vector<int> out;
    std::string body = s;
    if (!body.empty() && body.front() == '[') body = body.substr(1);
    if (!body.empty() && body.back() == ']') body.pop_back();
    std::istringstream is(body);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        std::size_t used = 0;
        int value = 0;
        try {
            value = std::stoi(tok, &used);
        } catch (const std::exception&) {
            throw ConfigError("bad permutation entry '" + tok + "' in '" + s + "'");
        }
        if (used != tok.size())
            throw ConfigError("bad permutation entry '" + tok + "' in '" + s + "'");
        out.push_back(value);
    }
    if (out.empty()) throw ConfigError("empty permutation '" + s + "'");
    return out;
}

const char* conn_kind_name(ConnKind k) {
    switch (k) {
        case ConnKind::None: return "none";
        case ConnKind::Chained: return "chained";
        case ConnKind::Hard: return "hard";
        case ConnKind::Soft: return "soft";
    }
    return "?";
}

void MptConfig::validate() const {
    if (d_model <= 0 || heads <= 0 || d_ff <= 0 || layers <= 0 || vocab <= 3 || max_len <= 0 ||
        decoder_layers <= 0)
        throw ConfigError("nonpositive model dimension");
    if (d_model % heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by heads " +
                          std::to_string(heads));
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    if (passes < 1) throw ConfigError("passes must be >= 1");
    if (connection.kind == ConnKind::None) {
        if (passes != 1) throw ConfigError("connection 'none' requires passes == 1");
    } else {
        if (passes < 2)
            throw ConfigError(std::string("connection '") + conn_kind_name(connection.kind) +
                              "' requires passes >= 2");
    }
    if (connection.kind == ConnKind::Hard) {
        std::string issues;
        if (!is_bijection(connection.perm, layers, &issues))
            throw ConfigError("hard connection " + perm_to_string(connection.perm) +
                              " is not a bijection on {0.." + std::to_string(layers - 1) + "}:" +
                              issues);
    }
}

}  // namespace mpt
