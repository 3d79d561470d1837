#pragma once

#include <stdexcept>
#include <string>

namespace hidi {

/// Invalid configuration: bad shapes, unknown names, out-of-range settings.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// API misuse: stale tapes or caches, stepping a finished episode, empty batches.
struct usage_error : std::logic_error {
  using std::logic_error::logic_error;
};

/// Linear algebra failure (Cholesky did not succeed after jitter escalation).
struct numerical_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during optimization. `term()` names the culprit.
class training_error : public std::runtime_error {
 public:
  training_error(std::string term, const std::string& what)
      : std::runtime_error(what), term_(std::move(term)) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

}  // namespace hidi
