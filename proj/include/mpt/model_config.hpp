#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mpt {

enum class ConnKind { None, Chained, Hard, Soft };

struct ConnectionSpec {
    ConnKind kind = ConnKind::None;
    std::vector<int> perm;  // Hard only: inner layer feeding each outer layer

    static ConnectionSpec none() { return {}; }
    static ConnectionSpec chained() { return {ConnKind::Chained, {}}; }
    static ConnectionSpec hard(std::vector<int> perm) { return {ConnKind::Hard, std::move(perm)}; }
    static ConnectionSpec soft() { return {ConnKind::Soft, {}}; }
};

enum class Tap { ModuleOutput, AttentionOutput };
enum class Inject { PreResidual, PostResidual };

// The 2x2 grid of tap x injection points: (a)=(module,pre), (b)=(module,post),
// (c)=(attention,pre), (d)=(attention,post).
struct RoutingPattern {
    Tap tap = Tap::ModuleOutput;
    Inject inject = Inject::PreResidual;

    static RoutingPattern from_letter(char c);
    char letter() const {
        if (tap == Tap::ModuleOutput) return inject == Inject::PreResidual ? 'a' : 'b';
        return inject == Inject::PreResidual ? 'c' : 'd';
    }
};

enum class LossMode { FinalPass, SumAllPasses, RandomPass };

enum class DecodeRegime { FirstPass, FinalPass };

struct MptConfig {
    int d_model = 64;
    int heads = 4;
    int d_ff = 128;
    int layers = 2;          // N, per pass
    int passes = 1;          // P
    int vocab = 16;          // V, including pad/bos/eos
    int max_len = 64;        // positional table length
    int decoder_layers = 2;
    double dropout = 0.1;
    ConnectionSpec connection;
    RoutingPattern routing;
    LossMode loss_mode = LossMode::FinalPass;

    void validate() const;
};

// True iff perm is a bijection on {0..n-1}; duplicates reported via `issues`.
bool is_bijection(const std::vector<int>& perm, int n, std::string* issues = nullptr);

std::string perm_to_string(const std::vector<int>& perm);        // "[0,4,1,5,2,3]"
std::vector<int> perm_from_string(const std::string& s);

const char* conn_kind_name(ConnKind k);

}  // namespace mpt
