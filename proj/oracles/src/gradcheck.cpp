#include "cmfd/oracles/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

namespace cmfd::oracle {

GradCheckReport check_gradients(const LossFn& loss, std::span<Parameter<double>* const> params,
                                const GradCheckOptions& opts) {
  for (Parameter<double>* p : params) p->zero_grad();
  {
    Graph<double> g;
    g.backward(loss(g));
  }
  auto evaluate = [&] {
    Graph<double> g(false);
    return loss(g).value()[0];
  };

  std::mt19937_64 rng(opts.seed);
  GradCheckReport report;
  for (Parameter<double>* p : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> entries;
    if (opts.max_entries == 0 || opts.max_entries >= n) {
      entries.resize(n);
      for (std::size_t i = 0; i < n; ++i) entries[i] = i;
    } else {
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (std::abs(p->grad[i]) > std::abs(p->grad[best])) best = i;
      }
      entries.push_back(best);
      while (entries.size() < opts.max_entries) entries.push_back(static_cast<std::size_t>(rng() % n));
    }
    for (std::size_t i : entries) {
      const double saved = p->value[i];
      p->value[i] = saved + opts.step;
      const double up = evaluate();
      p->value[i] = saved - opts.step;
      const double down = evaluate();
      p->value[i] = saved;
      const double numeric = (up - down) / (2 * opts.step);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || report.worst.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (rel >= report.max_rel_error) {
          std::ostringstream os;
          os << p->name << '[' << i << "]: " << analytic << " vs " << numeric;
          report.worst = os.str();
        }
      }
    }
  }
  return report;
}

}  // namespace cmfd::oracle
