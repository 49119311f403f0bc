#include "rilke/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "rilke/error.hpp"
#include "rilke/rng.hpp"
#include "rilke/tokenizer.hpp"

namespace rilke {
namespace {

struct Relation {
  std::string name;
  std::vector<std::string> templates;
  std::string answer;                  // {S}, {A}, {B} slots
  std::vector<std::string> first;      // values for {A}
  std::vector<std::string> second;     // values for {B}
};

const std::vector<Relation>& relations() {
  static const std::vector<Relation> rels = {
      {"city",
       {"which city is home to {S}", "name the home city of {S}", "in what town can you find {S}",
        "tell me the city that hosts {S}"},
       "{F} lives in {A} near the {B} .",
       {"paris", "tokyo", "lima", "oslo", "cairo", "delhi", "quito", "dakar", "hanoi", "perth"},
       {"river", "bridge", "tower", "market", "harbor", "castle", "park", "temple"}},
      {"job",
       {"what is the job of {S}", "which profession is held by {S}",
        "tell me the occupation of {S}", "what work is done by {S}"},
       "{F} works as a {A} at the {B} .",
       {"baker", "pilot", "nurse", "farmer", "tailor", "sailor", "miner", "painter", "judge",
        "chemist"},
       {"school", "factory", "hospital", "bank", "museum", "airport", "library", "station"}},
      {"food",
       {"what food is loved by {S}", "which dish is the favorite of {S}",
        "name the meal preferred by {S}", "tell me what food pleases {S}"},
       "{F} likes to eat {A} with {B} every day .",
       {"rice", "noodles", "bread", "soup", "cheese", "fish", "beans", "salad", "pasta", "curry"},
       {"tea", "honey", "butter", "lemon", "pepper", "garlic", "ginger", "milk"}},
      {"pet",
       {"which animal is kept by {S}", "what pet belongs to {S}", "name the animal owned by {S}",
        "tell me the companion animal of {S}"},
       "{F} keeps a {A} {B} at home .",
       {"black", "white", "gray", "brown", "golden", "spotted", "red", "striped"},
       {"cat", "dog", "parrot", "rabbit", "horse", "turtle", "goat", "hamster", "ferret", "pony"}},
  };
  return rels;
}

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";

std::vector<std::string> name_pool(std::size_t count, bool family) {
  std::vector<std::string> all;
  static const std::vector<std::string> endings = {"ar", "en", "os", "ix"};
  for (char c1 : kConsonants)
    for (char v1 : kVowels)
      for (char c2 : kConsonants) {
        if (family) {
          for (const auto& e : endings) all.push_back(std::string{c1, v1, c2} + e);
        } else {
          for (char v2 : kVowels) all.push_back(std::string{c1, v1, c2, v2});
        }
      }
  Rng rng(family ? 0xfa111e5ULL : 0x9171e5ULL);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(count, all.size()));
  return all;
}

constexpr std::size_t kGivenNames = 40;
constexpr std::size_t kFamilyNames = 240;

const std::vector<std::string>& given_names() {
  static const auto pool = name_pool(kGivenNames, false);
  return pool;
}

const std::vector<std::string>& family_names() {
  static const auto pool = name_pool(kFamilyNames, true);
  return pool;
}

std::string fill(std::string text, const std::string& slot, const std::string& value) {
  for (std::size_t at = text.find(slot); at != std::string::npos; at = text.find(slot, at + value.size()))
    text.replace(at, slot.size(), value);
  return text;
}

std::string answer(const Relation& rel, const std::string& subject, std::size_t a, std::size_t b) {
  const std::string family = subject.substr(subject.rfind(' ') + 1);
  return fill(fill(fill(rel.answer, "{F}", family), "{A}", rel.first[a]), "{B}", rel.second[b]);
}

template <typename T>
T pick(Rng& rng, const std::vector<T>& v) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

std::size_t pick_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace

std::vector<std::string> corpus_lexicon() {
  std::vector<std::string> words;
  std::set<std::string> seen;
  auto add_text = [&](const std::string& text) {
    for (auto& w : Tokenizer::split(text))
      if (w.front() != '{' && seen.insert(w).second) words.push_back(w);
  };
  for (const auto& rel : relations()) {
    for (const auto& t : rel.templates) add_text(t);
    add_text(rel.answer);
    for (const auto& v : rel.first) add_text(v);
    for (const auto& v : rel.second) add_text(v);
  }
  for (const auto& n : given_names()) add_text(n);
  for (const auto& n : family_names()) add_text(n);
  return words;
}

Corpus generate_corpus(const CorpusOptions& o) {
  require(o.items >= 1, ErrorKind::input, "corpus needs at least one item");
  require(o.paraphrases >= 0 && o.paraphrases <= 3, ErrorKind::input,
          "paraphrases per item must be in [0, 3]");
  require(o.min_family >= 1 && o.max_family >= o.min_family &&
              o.max_family <= static_cast<int>(kGivenNames),
          ErrorKind::input, "bad family size range");
  Rng rng(derive_seed(o.seed, "corpus"));
  const auto& rels = relations();

  std::vector<std::string> families = family_names();
  std::shuffle(families.begin(), families.end(), rng);
  const auto probe_count = static_cast<std::size_t>(o.probe_families);
  // capacity: every edit family can hold at most max_family members
  const std::size_t edit_families = families.size() > probe_count ? families.size() - probe_count : 0;
  require(static_cast<std::size_t>(o.items) <= edit_families * static_cast<std::size_t>(o.max_family),
          ErrorKind::input,
          "requested " + std::to_string(o.items) + " items exceeds slot capacity " +
              std::to_string(edit_families * o.max_family));

  Corpus c;
  std::size_t family_cursor = 0;

  struct Person {
    std::string subject;
    std::size_t a, b;
  };
  auto make_members = [&](std::size_t count, const Relation& rel) {
    std::vector<std::string> given = given_names();
    std::shuffle(given.begin(), given.end(), rng);
    std::vector<Person> people;
    for (std::size_t i = 0; i < count; ++i)
      people.push_back({given[i] + " " + families[family_cursor], pick_index(rng, rel.first.size()),
                        pick_index(rng, rel.second.size())});
    ++family_cursor;
    return people;
  };
  auto add_pretrain = [&](const Relation& rel, const Person& p) {
    for (const auto& t : rel.templates)
      c.pretrain.push_back(fill(t, "{S}", p.subject) + " " + answer(rel, p.subject, p.a, p.b));
  };

  for (std::size_t f = 0; f < probe_count; ++f) {
    const Relation& rel = rels[pick_index(rng, rels.size())];
    const auto size = static_cast<std::size_t>(
        std::uniform_int_distribution<int>(std::max(o.min_family, 2), o.max_family)(rng));
    for (const auto& p : make_members(size, rel)) {
      add_pretrain(rel, p);
      c.probes.push_back({fill(pick(rng, rel.templates), "{S}", p.subject), answer(rel, p.subject, p.a, p.b)});
      c.probe_subjects.push_back(p.subject);
    }
  }

  int remaining = o.items;
  while (remaining > 0) {
    const Relation& rel = rels[pick_index(rng, rels.size())];
    const int size = std::min(remaining, std::uniform_int_distribution<int>(o.min_family, o.max_family)(rng));
    const std::string family = families[family_cursor];
    auto people = make_members(static_cast<std::size_t>(size), rel);
    const std::size_t prompt_template = pick_index(rng, rel.templates.size());

    std::size_t new_a = pick_index(rng, rel.first.size());
    auto taken = [&](std::size_t a) {
      return std::any_of(people.begin(), people.end(), [&](const Person& p) { return p.a == a; });
    };
    while (taken(new_a)) new_a = pick_index(rng, rel.first.size());
    const std::size_t new_b = pick_index(rng, rel.second.size());

    for (const auto& p : people) {
      add_pretrain(rel, p);
      KnowledgeItem item;
      item.id = "k" + std::to_string(c.items.size() + 1);
      item.prompt = fill(rel.templates[prompt_template], "{S}", p.subject);
      item.target = answer(rel, p.subject, new_a, new_b);
      std::vector<std::size_t> others;
      for (std::size_t t = 0; t < rel.templates.size(); ++t)
        if (t != prompt_template) others.push_back(t);
      for (int k = 0; k < o.paraphrases; ++k)
        item.paraphrases.push_back(fill(rel.templates[others[static_cast<std::size_t>(k)]], "{S}", p.subject));
      c.items.push_back(std::move(item));
      c.item_subjects.push_back(p.subject);
      c.item_groups.push_back(family);
    }
    remaining -= size;
  }
  return c;
}

namespace {

std::string require_string(const nlohmann::json& obj, const char* field, std::size_t line) {
  if (!obj.contains(field) || !obj.at(field).is_string())
    fail(ErrorKind::parse, "line " + std::to_string(line) + ": missing or non-string field \"" +
                               field + "\"");
  return obj.at(field).get<std::string>();
}

template <typename F>
void for_each_json_line(const std::filesystem::path& path, F&& fn) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::input, "cannot open " + path.string());
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::parse, "line " + std::to_string(number) + ": " + e.what());
    }
    if (!obj.is_object()) fail(ErrorKind::parse, "line " + std::to_string(number) + ": not an object");
    fn(obj, number);
  }
}

}  // namespace

std::vector<KnowledgeItem> ingest_jsonl(const std::filesystem::path& path) {
  std::vector<KnowledgeItem> items;
  std::set<std::string> ids;
  for_each_json_line(path, [&](const nlohmann::json& obj, std::size_t line) {
    KnowledgeItem item;
    item.id = require_string(obj, "id", line);
    item.prompt = require_string(obj, "prompt", line);
    item.target = require_string(obj, "target", line);
    if (obj.contains("paraphrases")) {
      const auto& arr = obj.at("paraphrases");
      if (!arr.is_array())
        fail(ErrorKind::parse, "line " + std::to_string(line) + ": \"paraphrases\" must be an array");
      for (const auto& p : arr) {
        if (!p.is_string())
          fail(ErrorKind::parse, "line " + std::to_string(line) + ": paraphrase must be a string");
        item.paraphrases.push_back(p.get<std::string>());
      }
    }
    require(!item.prompt.empty() && !item.target.empty(), ErrorKind::parse,
            "line " + std::to_string(line) + ": prompt and target must be non-empty");
    require(ids.insert(item.id).second, ErrorKind::input,
            "line " + std::to_string(line) + ": duplicate id " + item.id);
    items.push_back(std::move(item));
  });
  return items;
}

void export_jsonl(const std::filesystem::path& path, const std::vector<KnowledgeItem>& items) {
  std::ostringstream out;
  for (const auto& item : items) {
    nlohmann::ordered_json obj;
    obj["id"] = item.id;
    obj["prompt"] = item.prompt;
    obj["target"] = item.target;
    obj["paraphrases"] = item.paraphrases;
    out << obj.dump() << '\n';
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::input, "cannot write " + path.string());
  f << out.str();
}

std::vector<ProbeItem> ingest_probes(const std::filesystem::path& path) {
  std::vector<ProbeItem> probes;
  for_each_json_line(path, [&](const nlohmann::json& obj, std::size_t line) {
    probes.push_back({require_string(obj, "prompt", line), require_string(obj, "expected", line)});
  });
  return probes;
}

void export_probes(const std::filesystem::path& path, const std::vector<ProbeItem>& probes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::input, "cannot write " + path.string());
  for (const auto& p : probes) {
    nlohmann::ordered_json obj;
    obj["prompt"] = p.prompt;
    obj["expected"] = p.expected;
    f << obj.dump() << '\n';
  }
}

}  // namespace rilke
