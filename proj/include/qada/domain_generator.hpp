#pragma once

#include <string>
#include <utility>
#include <vector>

#include "qada/dataset.hpp"
#include "qada/rng.hpp"

namespace qada {

/// Synthetic source/target pair of fact-lookup QA datasets. Each context
/// lists facts about one person (city, job, pet, food, team); the question
/// asks for one of them. Target questions name the relation by a one- or
/// two-hop lexicon synonym, and target contexts are longer, with more facts,
/// filler sentences, new names and mostly new values.
struct GenConfig {
  std::size_t source_size = 200;
  std::size_t target_size = 200;
  std::size_t source_min_facts = 3;
  std::size_t source_max_facts = 4;
  std::size_t target_min_facts = 4;
  std::size_t target_max_facts = 5;
  std::size_t target_max_fillers = 2;
  std::size_t names_per_domain = 30;
  std::size_t values_per_relation = 6;
  double shared_value_fraction = 0.25;  // target facts drawing from the source value pool
  double shared_name_fraction = 0.0;    // target contexts about a source-pool person
  double target_synonym_rate = 0.5;     // target questions naming the relation by a synonym

  void validate() const;
};

struct DomainPair {
  std::vector<QaExample> source;
  std::vector<QaExample> target;            // labelled, for evaluation only
  std::vector<QaExample> target_unlabeled;  // same examples, labels stripped
  std::vector<std::pair<std::string, std::string>> lexicon;  // both directions
};

DomainPair generate_domain_pair(const GenConfig& config, Rng& rng);

struct DevSplit {
  std::vector<QaExample> train;
  std::vector<QaExample> dev;
};

/// Holds out round(fraction * n) examples chosen by rng; both parts keep
/// their original relative order.
DevSplit split_dev(const std::vector<QaExample>& examples, double fraction, Rng& rng);

}  // namespace qada
