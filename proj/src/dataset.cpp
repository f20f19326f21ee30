#include "autocirc/dataset.hpp"

#include "autocirc/error.hpp"

namespace autocirc {

void TaskDataset::validate(const ModelConfig& config) const {
  require(!examples.empty(), ErrorKind::kUsage, "dataset has no examples");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const TaskExample& ex = examples[i];
    const std::string at = "example " + std::to_string(i) + ": ";
    require(ex.clean.size() == ex.corrupted.size(), ErrorKind::kPairing,
            at + "clean and corrupted lengths differ");
    check_tokens(config, ex.clean);
    check_tokens(config, ex.corrupted);
    if (!ex.corrupted_pos.empty()) {
      require(ex.corrupted_pos.size() == ex.clean.size(), ErrorKind::kPairing,
              at + "positional override length differs from sequence length");
      for (std::size_t p : ex.corrupted_pos) {
        require(p < config.n_ctx, ErrorKind::kContext, at + "positional override row out of range");
      }
    }
    check_targets(metric, ex.targets, ex.clean.size(), config.vocab);
  }
}

}  // namespace autocirc
