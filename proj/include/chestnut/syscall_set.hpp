#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <iterator>
#include <span>
#include <vector>

namespace chestnut {

// Sorted, duplicate-free set of syscall numbers for one architecture.
class SyscallSet {
 public:
  using value_type = std::uint32_t;
  using const_iterator = std::vector<std::uint32_t>::const_iterator;

  SyscallSet() = default;
  SyscallSet(std::initializer_list<std::uint32_t> init)
      : numbers_(init) { normalize(); }
  explicit SyscallSet(std::vector<std::uint32_t> numbers)
      : numbers_(std::move(numbers)) { normalize(); }

  bool contains(std::uint32_t n) const {
    return std::binary_search(numbers_.begin(), numbers_.end(), n);
  }

  void insert(std::uint32_t n) {
    auto it = std::lower_bound(numbers_.begin(), numbers_.end(), n);
    if (it == numbers_.end() || *it != n) numbers_.insert(it, n);
  }

  void erase(std::uint32_t n) {
    auto it = std::lower_bound(numbers_.begin(), numbers_.end(), n);
    if (it != numbers_.end() && *it == n) numbers_.erase(it);
  }

  SyscallSet& operator|=(const SyscallSet& other) {
    if (other.empty()) return *this;
    std::vector<std::uint32_t> out;
    out.reserve(numbers_.size() + other.numbers_.size());
    std::set_union(numbers_.begin(), numbers_.end(), other.numbers_.begin(),
                   other.numbers_.end(), std::back_inserter(out));
    numbers_ = std::move(out);
    return *this;
  }

  friend SyscallSet operator|(SyscallSet a, const SyscallSet& b) {
    a |= b;
    return a;
  }

  friend SyscallSet operator&(const SyscallSet& a, const SyscallSet& b) {
    SyscallSet r;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                          std::back_inserter(r.numbers_));
    return r;
  }

  friend SyscallSet operator-(const SyscallSet& a, const SyscallSet& b) {
    SyscallSet r;
    std::set_difference(a.begin(), a.end(), b.begin(), b.end(),
                        std::back_inserter(r.numbers_));
    return r;
  }

  bool is_subset_of(const SyscallSet& other) const {
    return std::includes(other.begin(), other.end(), begin(), end());
  }

  std::size_t size() const { return numbers_.size(); }
  bool empty() const { return numbers_.empty(); }
  const_iterator begin() const { return numbers_.begin(); }
  const_iterator end() const { return numbers_.end(); }
  std::span<const std::uint32_t> values() const { return numbers_; }
  const std::vector<std::uint32_t>& vector() const { return numbers_; }

  friend bool operator==(const SyscallSet&, const SyscallSet&) = default;

 private:
  void normalize() {
    std::sort(numbers_.begin(), numbers_.end());
    numbers_.erase(std::unique(numbers_.begin(), numbers_.end()),
                   numbers_.end());
  }

  std::vector<std::uint32_t> numbers_;
};

}  // namespace chestnut
