#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mcad/diffcore.hpp"
#include "mcad/teachers.hpp"

namespace mcad {

/// One split of paired raw vectors. Each image owns one pair group; texts
/// whose group matches are its captions.
template <class Real>
struct SplitData {
  std::vector<ItemId> image_ids;
  std::vector<std::uint64_t> image_groups;
  Matrix<Real> image_raw;
  std::vector<ItemId> text_ids;
  std::vector<std::uint64_t> text_groups;
  Matrix<Real> text_raw;

  /// captions[i] lists text indices whose group equals image i's group.
  std::vector<std::vector<std::uint32_t>> captions;
  /// image index of each text's group
  std::vector<std::uint32_t> image_of_text;

  std::size_t n_images() const { return image_ids.size(); }
  std::size_t n_texts() const { return text_ids.size(); }

  /// Builds the caption index and checks split invariants.
  void index() {
    if (image_ids.size() != image_raw.rows || image_groups.size() != image_raw.rows ||
        text_ids.size() != text_raw.rows || text_groups.size() != text_raw.rows) {
      throw ContractError("split: id/group/vector counts disagree");
    }
    std::unordered_map<std::uint64_t, std::uint32_t> image_by_group;
    for (std::size_t i = 0; i < image_groups.size(); ++i) {
      if (!image_by_group.emplace(image_groups[i], static_cast<std::uint32_t>(i)).second) {
        throw ContractError("split: two images share group " +
                            std::to_string(image_groups[i]));
      }
    }
    captions.assign(image_ids.size(), {});
    image_of_text.assign(text_ids.size(), 0);
    for (std::size_t t = 0; t < text_groups.size(); ++t) {
      auto it = image_by_group.find(text_groups[t]);
      if (it == image_by_group.end()) {
        throw ContractError("split: text " + std::to_string(text_ids[t]) +
                            " has no image in group " + std::to_string(text_groups[t]));
      }
      captions[it->second].push_back(static_cast<std::uint32_t>(t));
      image_of_text[t] = it->second;
    }
    for (std::size_t i = 0; i < captions.size(); ++i) {
      if (captions[i].empty()) {
        throw ContractError("split: image " + std::to_string(image_ids[i]) +
                            " has no caption");
      }
    }
  }
};

/// Everything training needs: splits, frozen teachers.
template <class Real>
struct World {
  SplitData<Real> train;
  SplitData<Real> val;
  SplitData<Real> test;
  DualTeacherBundle<Real> dual;
  std::shared_ptr<const PairOracle> oracle;
};

}  // namespace mcad
