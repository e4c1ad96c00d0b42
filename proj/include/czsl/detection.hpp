#pragma once

#include "czsl/box.hpp"

namespace czsl {

/// One scored, labelled box; the unit of evaluation.
struct Detection {
  int image_id = 0;
  Box box;
  int composition = 0;  // composition id
  double score = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct GroundTruth {
  int image_id = 0;
  Box box;
  int composition = 0;
};

}  // namespace czsl
