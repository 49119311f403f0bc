#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rilke {

struct KnowledgeItem {
  std::string id;
  std::string prompt;
  std::string target;
  std::vector<std::string> paraphrases;

  friend bool operator==(const KnowledgeItem&, const KnowledgeItem&) = default;
};

struct ProbeItem {
  std::string prompt;
  std::string expected;

  friend bool operator==(const ProbeItem&, const ProbeItem&) = default;
};

struct CorpusOptions {
  int items = 200;
  int paraphrases = 3;
  int probe_families = 10;
  int min_family = 1;
  int max_family = 6;
  std::uint64_t seed = 0;
};

// Synthetic fact corpus. People are "<given> <family>" pairs; each family
// shares one relation and one prompt template, and every edit of a family
// moves its members to the same new value. Probes come from held-out
// families that are never edited.
struct Corpus {
  std::vector<KnowledgeItem> items;
  std::vector<ProbeItem> probes;
  std::vector<std::string> pretrain;  // one "prompt answer" line per fact/template
  std::vector<std::string> item_subjects;   // parallel to items
  std::vector<std::string> item_groups;     // family name, parallel to items
  std::vector<std::string> probe_subjects;  // parallel to probes
};

Corpus generate_corpus(const CorpusOptions& options);

// Every word the generator can emit, in a fixed order independent of seed.
std::vector<std::string> corpus_lexicon();

// Schema: {"id": str, "prompt": str, "target": str, "paraphrases": [str, ...]}
std::vector<KnowledgeItem> ingest_jsonl(const std::filesystem::path& path);
void export_jsonl(const std::filesystem::path& path, const std::vector<KnowledgeItem>& items);

// Schema: {"prompt": str, "expected": str}
std::vector<ProbeItem> ingest_probes(const std::filesystem::path& path);
void export_probes(const std::filesystem::path& path, const std::vector<ProbeItem>& probes);

}  // namespace rilke
