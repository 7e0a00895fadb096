#pragma once

#include <stdexcept>
#include <string>

namespace vmfm {

// Error taxonomy mirrors the CLI exit codes: usage -> 2, missing artifact -> 3,
// invariant violation -> 4. std::invalid_argument from op contracts also maps to 4.
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct missing_artifact_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct invariant_error : std::logic_error {
  using std::logic_error::logic_error;
};

// Thrown when ground-truth labels are read through an unlabeled data view.
struct label_access_error : invariant_error {
  label_access_error() : invariant_error("ground-truth label access through an unlabeled view") {}
};

}  // namespace vmfm
