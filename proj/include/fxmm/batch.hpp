#pragma once

// A padded mini-batch of user histories. Left-padded: PAD (id 0) positions
// precede all real positions of a row. target_ids holds the next item per
// position, 0 where no supervised target exists.

#include <cstdint>
#include <vector>

namespace fxmm {

struct SequenceBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> item_ids;             // batch*length
  std::vector<std::int64_t> timestamps;  // batch*length
  std::vector<int> target_ids;           // batch*length

  bool valid(int b, int pos) const {
    return item_ids[static_cast<std::size_t>(b) * length + pos] != 0;
  }
  bool has_target(int b, int pos) const {
    return target_ids[static_cast<std::size_t>(b) * length + pos] != 0;
  }
};

}  // namespace fxmm
