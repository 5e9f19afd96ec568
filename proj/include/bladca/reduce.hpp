#pragma once

#include <cstddef>
#include <functional>

namespace bladca {

/// Pairwise (tree) reduction over [begin, end). The combine order depends only
/// on the index range, so accumulated sums are identical no matter how the
/// terms were produced (serial or parallel).
template <typename Acc, typename TermFn>
Acc pairwise_sum(std::size_t begin, std::size_t end, TermFn&& term) {
  if (end - begin == 1) return term(begin);
  std::size_t mid = begin + (end - begin) / 2;
  Acc left = pairwise_sum<Acc>(begin, mid, term);
  Acc right = pairwise_sum<Acc>(mid, end, term);
  left += right;
  return left;
}

} // namespace bladca
