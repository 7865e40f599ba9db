#include "mpt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mpt/errors.hpp"

namespace mpt {

GradCheckReport gradcheck(const std::function<Tensor(Tape&)>& f,
                          const std::vector<std::pair<std::string, Tensor>>& inputs,
                          double h, double tol) {
    for (const auto& [name, t] : inputs) {
        auto& g = t.node()->grad;
        std::fill(g.begin(), g.end(), 0.0);
    }
    Tape tape;
    Tensor loss = f(tape);
    if (loss.size() != 1) throw ContractError("gradcheck requires a scalar-valued function");
    tape.backward(loss);

    auto eval = [&f]() {
        Tape t(false);
        return f(t).item();
    };

    GradCheckReport report;
    for (const auto& [name, t] : inputs) {
        GradCheckEntry entry{name, 0.0};
        if (t.requires_grad()) {
            t.node()->ensure_grad();
            auto& data = t.node()->data;
            const auto& analytic = t.node()->grad;
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double orig = data[i];
                data[i] = orig + h;
                const double fp = eval();
                data[i] = orig - h;
                const double fm = eval();
                data[i] = orig;
                const double numeric = (fp - fm) / (2.0 * h);
                const double a = analytic[i];
                const double rel =
                    std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
                entry.max_rel_err = std::max(entry.max_rel_err, rel);
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace mpt
