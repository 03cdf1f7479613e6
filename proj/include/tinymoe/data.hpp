#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tinymoe/example.hpp"
#include "tinymoe/rng.hpp"

namespace tinymoe::data {

// --- vocabulary -------------------------------------------------------------

inline constexpr std::array<std::string_view, 6> kColors = {"red", "green", "blue", "yellow", "purple", "orange"};
inline constexpr std::array<std::string_view, 3> kShapes = {"circle", "square", "triangle"};
inline constexpr int kNumColors = static_cast<int>(kColors.size());
inline constexpr int kNumShapes = static_cast<int>(kShapes.size());

// color + shape one-hots, then row and column one-hots
constexpr int patch_dim(int height, int width) { return kNumColors + kNumShapes + height + width; }

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kSep = 2;
inline constexpr int kEos = 3;

inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = [] {
    std::vector<std::string> w = {"<pad>", "<bos>", "<sep>", "<eos>"};
    for (auto c : kColors) w.emplace_back(c);
    for (auto s : kShapes) w.emplace_back(s);
    for (int d = 0; d <= 9; ++d) w.push_back(std::to_string(d));
    for (auto t : {"describe", "how", "many", "where", "is", "the", "more", "or", "row", "col"}) w.emplace_back(t);
    return w;
  }();
  return v;
}

inline int vocab_size() { return static_cast<int>(vocabulary().size()); }

inline int token_id(std::string_view word) {
  static const std::map<std::string, int, std::less<>> index = [] {
    std::map<std::string, int, std::less<>> m;
    for (std::size_t i = 0; i < vocabulary().size(); ++i) m.emplace(vocabulary()[i], static_cast<int>(i));
    return m;
  }();
  auto it = index.find(word);
  check(it != index.end(), ErrorCode::UnknownSymbol, "'" + std::string(word) + "' is not in the vocabulary");
  return it->second;
}

inline int color_token(int c) { return 4 + c; }
inline int shape_token(int s) { return 4 + kNumColors + s; }
inline int digit_token(int d) { return 4 + kNumColors + kNumShapes + d; }

inline std::optional<int> color_of_token(int id) {
  if (id >= 4 && id < 4 + kNumColors) return id - 4;
  return std::nullopt;
}
inline std::optional<int> shape_of_token(int id) {
  if (id >= 4 + kNumColors && id < 4 + kNumColors + kNumShapes) return id - 4 - kNumColors;
  return std::nullopt;
}
inline std::optional<int> digit_of_token(int id) {
  const int base = 4 + kNumColors + kNumShapes;
  if (id >= base && id < base + 10) return id - base;
  return std::nullopt;
}

// Words are separated by exactly one space; anything else is rejected so
// that detokenize(tokenize(t)) == t for every accepted t.
inline std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  if (text.empty()) {
    return ids;
  }
  std::size_t start = 0;
  while (true) {
    const auto end = text.find(' ', start);
    const auto word = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    ids.push_back(token_id(word));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return ids;
}

inline std::string detokenize(std::span<const int> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    check(ids[i] >= 0 && ids[i] < vocab_size(), ErrorCode::UnknownSymbol, "token id outside vocabulary");
    if (i > 0) out.push_back(' ');
    out += vocabulary()[static_cast<std::size_t>(ids[i])];
  }
  return out;
}

// --- images -----------------------------------------------------------------

struct Cell {
  int color = -1;  // -1 = empty
  int shape = -1;

  bool empty() const { return color < 0; }
  bool operator==(const Cell&) const = default;
};

struct GridImage {
  int height = 4;
  int width = 4;
  std::vector<Cell> cells;  // row-major

  const Cell& at(int r, int c) const { return cells[static_cast<std::size_t>(r * width + c)]; }
  bool operator==(const GridImage&) const = default;
};

struct DataConfig {
  int grid_height = 4;
  int grid_width = 4;
  int min_objects = 1;
  int max_objects = 6;
};

// One patch per cell: one-hot color and shape (zero for empty cells) plus the
// cell's row and column, so patch features carry location the way a ViT's do.
template <class T>
Mat<T> render(const GridImage& img) {
  Mat<T> px = Mat<T>::Zero(img.height * img.width, patch_dim(img.height, img.width));
  const int coords = kNumColors + kNumShapes;
  for (int i = 0; i < img.height * img.width; ++i) {
    const auto& cell = img.cells[static_cast<std::size_t>(i)];
    if (!cell.empty()) {
      px(i, cell.color) = T(1);
      px(i, kNumColors + cell.shape) = T(1);
    }
    px(i, coords + i / img.width) = T(1);
    px(i, coords + img.height + i % img.width) = T(1);
  }
  return px;
}

// --- samples ----------------------------------------------------------------

enum class TaskTag { Caption, Count, Locate, Compare };
inline constexpr std::array<TaskTag, 4> kAllTags = {TaskTag::Caption, TaskTag::Count, TaskTag::Locate,
                                                    TaskTag::Compare};

constexpr std::string_view tag_name(TaskTag t) {
  switch (t) {
    case TaskTag::Caption: return "caption";
    case TaskTag::Count: return "count";
    case TaskTag::Locate: return "locate";
    case TaskTag::Compare: return "compare";
  }
  return "?";
}

inline TaskTag parse_tag(std::string_view s) {
  for (auto t : kAllTags) {
    if (tag_name(t) == s) return t;
  }
  throw Error(ErrorCode::InvalidMix, "unknown task tag '" + std::string(s) + "'");
}

using TaskMix = std::map<TaskTag, double>;

struct Sample {
  GridImage image;
  std::string instruction;
  std::string response;
  TaskTag tag = TaskTag::Caption;

  bool operator==(const Sample&) const = default;
};

enum class Corruption { WrongCount, AbsentColor, WrongLocation, WrongCompare };
inline constexpr std::array<Corruption, 4> kAllCorruptions = {Corruption::WrongCount, Corruption::AbsentColor,
                                                             Corruption::WrongLocation, Corruption::WrongCompare};

constexpr std::string_view corruption_name(Corruption c) {
  switch (c) {
    case Corruption::WrongCount: return "wrong_count";
    case Corruption::AbsentColor: return "absent_color";
    case Corruption::WrongLocation: return "wrong_location";
    case Corruption::WrongCompare: return "wrong_compare";
  }
  return "?";
}

inline Corruption parse_corruption(std::string_view s) {
  for (auto c : kAllCorruptions) {
    if (corruption_name(c) == s) return c;
  }
  throw Error(ErrorCode::InvalidMix, "unknown corruption '" + std::string(s) + "'");
}

constexpr TaskTag corruption_task(Corruption c) {
  switch (c) {
    case Corruption::WrongCount: return TaskTag::Count;
    case Corruption::AbsentColor: return TaskTag::Caption;
    case Corruption::WrongLocation: return TaskTag::Locate;
    case Corruption::WrongCompare: return TaskTag::Compare;
  }
  return TaskTag::Count;
}

using CorruptionMix = std::map<Corruption, double>;

struct PreferencePair {
  GridImage image;
  std::string instruction;
  std::string chosen;
  std::string rejected;
  Corruption corruption = Corruption::WrongCount;

  bool operator==(const PreferencePair&) const = default;
};

namespace detail {

template <class Key>
void validate_mix(const std::map<Key, double>& mix) {
  double sum = 0.0;
  for (const auto& [k, w] : mix) {
    check(w >= 0.0 && std::isfinite(w), ErrorCode::InvalidMix, "mix weights must be finite and non-negative");
    sum += w;
  }
  check(!mix.empty() && std::abs(sum - 1.0) <= 1e-9, ErrorCode::InvalidMix, "mix fractions must sum to 1");
}

template <class Key>
Key draw(const std::map<Key, double>& mix, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  Key last = mix.begin()->first;
  for (const auto& [k, w] : mix) {
    if (w <= 0.0) continue;
    acc += w;
    last = k;
    if (u < acc) return k;
  }
  return last;
}

inline GridImage random_grid(const DataConfig& cfg, Rng& rng) {
  GridImage img;
  img.height = cfg.grid_height;
  img.width = cfg.grid_width;
  const int n_cells = img.height * img.width;
  img.cells.assign(static_cast<std::size_t>(n_cells), Cell{});
  const int n_obj = cfg.min_objects + static_cast<int>(rng.below(static_cast<std::size_t>(cfg.max_objects - cfg.min_objects + 1)));
  std::vector<int> order(static_cast<std::size_t>(n_cells));
  for (int i = 0; i < n_cells; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  for (int i = 0; i < n_obj; ++i) {
    auto& cell = img.cells[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    cell.color = static_cast<int>(rng.below(kNumColors));
    cell.shape = static_cast<int>(rng.below(kNumShapes));
  }
  return img;
}

inline std::array<int, kNumColors> color_counts(const GridImage& img) {
  std::array<int, kNumColors> n{};
  for (const auto& c : img.cells) {
    if (!c.empty()) ++n[static_cast<std::size_t>(c.color)];
  }
  return n;
}

inline std::string caption_of(const std::array<int, kNumColors>& counts) {
  std::string out;
  for (int c = 0; c < kNumColors; ++c) {
    if (counts[static_cast<std::size_t>(c)] > 0) {
      if (!out.empty()) out.push_back(' ');
      out += kColors[static_cast<std::size_t>(c)];
    }
  }
  return out;
}

// Builds one task on `img`; returns nullopt when the image cannot host it.
inline std::optional<Sample> make_task(const GridImage& img, TaskTag tag, Rng& rng) {
  Sample s;
  s.image = img;
  s.tag = tag;
  const auto counts = color_counts(img);
  std::vector<int> occupied;
  for (int i = 0; i < static_cast<int>(img.cells.size()); ++i) {
    if (!img.cells[static_cast<std::size_t>(i)].empty()) occupied.push_back(i);
  }
  switch (tag) {
    case TaskTag::Caption: {
      s.instruction = "describe";
      s.response = caption_of(counts);
      return s;
    }
    case TaskTag::Count: {
      int color = 0;
      if (!occupied.empty() && rng.uniform() < 0.5) {
        color = img.cells[static_cast<std::size_t>(occupied[rng.below(occupied.size())])].color;
      } else {
        color = static_cast<int>(rng.below(kNumColors));
      }
      s.instruction = "how many " + std::string(kColors[static_cast<std::size_t>(color)]);
      s.response = std::to_string(counts[static_cast<std::size_t>(color)]);
      return s;
    }
    case TaskTag::Locate: {
      std::vector<int> unique;
      for (int i : occupied) {
        const auto& a = img.cells[static_cast<std::size_t>(i)];
        int same = 0;
        for (int j : occupied) same += img.cells[static_cast<std::size_t>(j)] == a ? 1 : 0;
        if (same == 1) unique.push_back(i);
      }
      if (unique.empty()) return std::nullopt;
      const int i = unique[rng.below(unique.size())];
      const auto& a = img.cells[static_cast<std::size_t>(i)];
      s.instruction = "where is the " + std::string(kColors[static_cast<std::size_t>(a.color)]) + " " +
                      std::string(kShapes[static_cast<std::size_t>(a.shape)]);
      s.response = "row " + std::to_string(i / img.width) + " col " + std::to_string(i % img.width);
      return s;
    }
    case TaskTag::Compare: {
      std::vector<std::pair<int, int>> options;
      for (int a = 0; a < kNumColors; ++a) {
        for (int b = 0; b < kNumColors; ++b) {
          if (a != b && counts[static_cast<std::size_t>(a)] != counts[static_cast<std::size_t>(b)]) {
            options.emplace_back(a, b);
          }
        }
      }
      if (options.empty()) return std::nullopt;
      const auto [a, b] = options[rng.below(options.size())];
      s.instruction = "more " + std::string(kColors[static_cast<std::size_t>(a)]) + " or " +
                      std::string(kColors[static_cast<std::size_t>(b)]);
      const int winner = counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)] ? a : b;
      s.response = std::string(kColors[static_cast<std::size_t>(winner)]);
      return s;
    }
  }
  return std::nullopt;
}

inline Sample sample_task(const DataConfig& cfg, TaskTag tag, Rng& rng) {
  while (true) {
    const auto img = random_grid(cfg, rng);
    if (auto s = make_task(img, tag, rng)) return *s;
  }
}

}  // namespace detail

inline TaskMix uniform_mix() {
  return {{TaskTag::Caption, 0.25}, {TaskTag::Count, 0.25}, {TaskTag::Locate, 0.25}, {TaskTag::Compare, 0.25}};
}

// Each sample i draws from its own stream derived from (seed, i).
inline std::vector<Sample> gen_samples(std::uint64_t seed, std::size_t n, const TaskMix& mix, const DataConfig& cfg = {}) {
  check(n >= 1, ErrorCode::InvalidMix, "need at least one sample");
  detail::validate_mix(mix);
  check(cfg.min_objects >= 1 && cfg.max_objects >= cfg.min_objects &&
            cfg.max_objects <= cfg.grid_height * cfg.grid_width && cfg.max_objects <= 9,
        ErrorCode::InvalidConfig, "object count range does not fit the grid");
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::derived(seed, i);
    const TaskTag tag = detail::draw(mix, rng);
    out.push_back(detail::sample_task(cfg, tag, rng));
  }
  return out;
}

inline CorruptionMix uniform_corruption_mix() {
  return {{Corruption::WrongCount, 0.25},
          {Corruption::AbsentColor, 0.25},
          {Corruption::WrongLocation, 0.25},
          {Corruption::WrongCompare, 0.25}};
}

// Off by one in a random direction. A fixed +1 lets preference training learn
// "answer lower" instead of counting.
inline std::string corrupt_count(int truth, Rng& rng) {
  const bool up = truth == 0 || (truth < 9 && rng.uniform() < 0.5);
  return std::to_string(up ? truth + 1 : truth - 1);
}

// Applies `kind` to a ground-truth sample; nullopt if the sample cannot carry it.
inline std::optional<std::string> corrupt(const Sample& s, Corruption kind, Rng& rng) {
  const auto counts = detail::color_counts(s.image);
  switch (kind) {
    case Corruption::WrongCount:
      return corrupt_count(std::stoi(s.response), rng);
    case Corruption::AbsentColor: {
      std::vector<int> absent;
      for (int c = 0; c < kNumColors; ++c) {
        if (counts[static_cast<std::size_t>(c)] == 0) absent.push_back(c);
      }
      if (absent.empty()) return std::nullopt;
      auto with = counts;
      with[static_cast<std::size_t>(absent[rng.below(absent.size())])] = 1;
      return detail::caption_of(with);
    }
    case Corruption::WrongLocation: {
      // "row r col c"
      const auto ids = tokenize(s.response);
      int row = *digit_of_token(ids[1]);
      int col = *digit_of_token(ids[3]);
      if (rng.uniform() < 0.5) {
        row = (row + 1 + static_cast<int>(rng.below(static_cast<std::size_t>(s.image.height - 1)))) % s.image.height;
      } else {
        col = (col + 1 + static_cast<int>(rng.below(static_cast<std::size_t>(s.image.width - 1)))) % s.image.width;
      }
      return "row " + std::to_string(row) + " col " + std::to_string(col);
    }
    case Corruption::WrongCompare: {
      // "more a or b"
      const auto ids = tokenize(s.instruction);
      const auto a = detokenize(std::span<const int>(&ids[1], 1));
      const auto b = detokenize(std::span<const int>(&ids[3], 1));
      return s.response == a ? b : a;
    }
  }
  return std::nullopt;
}

inline std::vector<PreferencePair> gen_preference_pairs(std::uint64_t seed, std::size_t n, const CorruptionMix& mix,
                                                        const DataConfig& cfg = {}) {
  check(n >= 1, ErrorCode::InvalidMix, "need at least one pair");
  detail::validate_mix(mix);
  std::vector<PreferencePair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::derived(seed ^ 0x5bd1e995ULL, i);
    const Corruption kind = detail::draw(mix, rng);
    while (true) {
      const Sample s = detail::sample_task(cfg, corruption_task(kind), rng);
      auto neg = corrupt(s, kind, rng);
      if (!neg || *neg == s.response) continue;
      out.push_back(PreferencePair{s.image, s.instruction, s.response, *neg, kind});
      break;
    }
  }
  return out;
}

// --- verification -------------------------------------------------------------

struct Verdict {
  bool correct = false;
  int mentions = 0;        // color, shape and number tokens in the response
  int false_mentions = 0;

  bool hallucinated() const { return false_mentions > 0; }
};

// Checks a response against the grid by re-reading the cells. Shares no code
// with the generators above.
inline Verdict verify(const GridImage& img, std::string_view instruction, std::string_view response) {
  const auto q = tokenize(instruction);
  const auto a = tokenize(response);
  check(!q.empty(), ErrorCode::UnknownSymbol, "empty instruction");
  auto present_color = [&](int c) {
    return std::any_of(img.cells.begin(), img.cells.end(), [&](const Cell& x) { return x.color == c; });
  };
  auto present_shape = [&](int s) {
    return std::any_of(img.cells.begin(), img.cells.end(), [&](const Cell& x) { return !x.empty() && x.shape == s; });
  };
  auto count_color = [&](int c) {
    return static_cast<int>(std::count_if(img.cells.begin(), img.cells.end(), [&](const Cell& x) { return x.color == c; }));
  };

  Verdict v;
  std::string expected;
  // per-token truth test for the task at hand
  std::function<bool(std::size_t, int)> color_ok = [&](std::size_t, int c) { return present_color(c); };
  std::function<bool(std::size_t, int)> number_ok = [](std::size_t, int) { return false; };

  const std::string head = vocabulary()[static_cast<std::size_t>(q[0])];
  if (head == "how") {
    check(q.size() == 3 && color_of_token(q[2]).has_value(), ErrorCode::UnknownSymbol, "malformed count question");
    const int n = count_color(*color_of_token(q[2]));
    expected = std::to_string(n);
    number_ok = [n](std::size_t, int d) { return d == n; };
  } else if (head == "where") {
    check(q.size() == 5 && color_of_token(q[3]) && shape_of_token(q[4]), ErrorCode::UnknownSymbol,
          "malformed locate question");
    const int want_c = *color_of_token(q[3]);
    const int want_s = *shape_of_token(q[4]);
    int row = -1, col = -1;
    for (int r = 0; r < img.height; ++r) {
      for (int c = 0; c < img.width; ++c) {
        if (img.at(r, c).color == want_c && img.at(r, c).shape == want_s) {
          row = r;
          col = c;
        }
      }
    }
    expected = "row " + std::to_string(row) + " col " + std::to_string(col);
    number_ok = [&a, row, col](std::size_t i, int d) {
      if (i == 0) return false;
      const auto& prev = vocabulary()[static_cast<std::size_t>(a[i - 1])];
      return (prev == "row" && d == row) || (prev == "col" && d == col);
    };
  } else if (head == "more") {
    check(q.size() == 4 && color_of_token(q[1]) && color_of_token(q[3]), ErrorCode::UnknownSymbol,
          "malformed compare question");
    const int ca = *color_of_token(q[1]);
    const int cb = *color_of_token(q[3]);
    const int na = count_color(ca);
    const int nb = count_color(cb);
    const int winner = na > nb ? ca : (nb > na ? cb : -1);
    expected = winner >= 0 ? std::string(kColors[static_cast<std::size_t>(winner)]) : std::string();
    color_ok = [winner](std::size_t, int c) { return c == winner; };
  } else if (head == "describe") {
    for (int c = 0; c < kNumColors; ++c) {
      if (present_color(c)) {
        if (!expected.empty()) expected.push_back(' ');
        expected += kColors[static_cast<std::size_t>(c)];
      }
    }
  } else {
    throw Error(ErrorCode::UnknownSymbol, "unrecognized instruction '" + std::string(instruction) + "'");
  }

  for (std::size_t i = 0; i < a.size(); ++i) {
    bool ok = true;
    if (auto c = color_of_token(a[i])) {
      ok = color_ok(i, *c);
    } else if (auto s = shape_of_token(a[i])) {
      ok = present_shape(*s);
    } else if (auto d = digit_of_token(a[i])) {
      ok = number_ok(i, *d);
    } else {
      continue;
    }
    ++v.mentions;
    v.false_mentions += ok ? 0 : 1;
  }
  v.correct = !expected.empty() && response == expected;
  return v;
}

// --- tensor examples ----------------------------------------------------------

inline std::vector<int> prompt_tokens(std::string_view instruction) {
  std::vector<int> t = {kBos};
  for (int id : tokenize(instruction)) t.push_back(id);
  t.push_back(kSep);
  return t;
}

template <class T>
Example<T> make_example(const GridImage& img, std::string_view instruction, std::string_view response) {
  Example<T> ex;
  ex.pixels = render<T>(img);
  ex.tokens = prompt_tokens(instruction);
  const auto resp_start = ex.tokens.size();
  for (int id : tokenize(response)) ex.tokens.push_back(id);
  ex.tokens.push_back(kEos);
  const auto n_img = static_cast<std::size_t>(ex.pixels.rows());
  const auto len = n_img + ex.tokens.size();
  ex.targets.assign(len, -1);
  ex.mask.assign(len, 0);
  for (std::size_t p = 0; p + 1 < len; ++p) {
    if (p + 1 < n_img) continue;
    const auto ti = p + 1 - n_img;  // text index of the predicted token
    ex.targets[p] = ex.tokens[ti];
    ex.mask[p] = ti >= resp_start ? 1 : 0;
  }
  return ex;
}

template <class T>
Example<T> make_example(const Sample& s) {
  return make_example<T>(s.image, s.instruction, s.response);
}

template <class T>
PreferenceExample<T> make_preference_example(const PreferencePair& p) {
  return {make_example<T>(p.image, p.instruction, p.chosen), make_example<T>(p.image, p.instruction, p.rejected)};
}

// Right-pads with <pad>; padded positions are never in the mask.
template <class T>
Example<T> pad_example(Example<T> ex, std::size_t text_len) {
  check(text_len >= ex.tokens.size(), ErrorCode::ShapeError, "pad length shorter than example");
  const auto extra = text_len - ex.tokens.size();
  if (extra == 0) return ex;
  const auto old_len = ex.targets.size();
  ex.tokens.resize(text_len, kPad);
  ex.targets.resize(old_len + extra, kPad);
  ex.mask.resize(old_len + extra, 0);
  // the old final position now predicts the first pad
  ex.targets[old_len - 1] = kPad;
  return ex;
}

// --- batching -----------------------------------------------------------------

// Deterministic per-(seed, epoch) shuffle; every index appears once per epoch.
class Batcher {
 public:
  Batcher(std::size_t n_items, std::size_t batch_size, std::uint64_t seed)
      : n_(n_items), batch_size_(batch_size), seed_(seed) {
    check(batch_size >= 1, ErrorCode::InvalidConfig, "batch_size must be at least 1");
  }

  std::size_t batches_per_epoch() const { return (n_ + batch_size_ - 1) / batch_size_; }

  std::vector<std::vector<std::size_t>> epoch(std::uint64_t e) const {
    std::vector<std::size_t> order(n_);
    for (std::size_t i = 0; i < n_; ++i) order[i] = i;
    Rng rng = Rng::derived(seed_, e);
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n_; i += batch_size_) {
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                       order.begin() + static_cast<std::ptrdiff_t>(std::min(n_, i + batch_size_)));
    }
    return out;
  }

 private:
  std::size_t n_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

// Gathers `indices` and pads every member to the longest text length.
template <class T>
std::vector<Example<T>> padded_batch(std::span<const Example<T>> examples, std::span<const std::size_t> indices) {
  std::size_t longest = 0;
  for (auto i : indices) longest = std::max(longest, examples[i].tokens.size());
  std::vector<Example<T>> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(pad_example(examples[i], longest));
  return out;
}

// --- JSON-Lines persistence ---------------------------------------------------

inline nlohmann::json image_to_json(const GridImage& img) {
  auto rows = nlohmann::json::array();
  for (int r = 0; r < img.height; ++r) {
    auto row = nlohmann::json::array();
    for (int c = 0; c < img.width; ++c) {
      const auto& cell = img.at(r, c);
      if (cell.empty()) {
        row.push_back(nullptr);
      } else {
        row.push_back({{"color", kColors[static_cast<std::size_t>(cell.color)]},
                       {"shape", kShapes[static_cast<std::size_t>(cell.shape)]}});
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline GridImage image_from_json(const nlohmann::json& j) {
  GridImage img;
  img.height = static_cast<int>(j.size());
  img.width = img.height > 0 ? static_cast<int>(j[0].size()) : 0;
  for (const auto& row : j) {
    check(static_cast<int>(row.size()) == img.width, ErrorCode::InvalidImage, "ragged image rows");
    for (const auto& cell : row) {
      Cell c;
      if (!cell.is_null()) {
        const auto color = cell.at("color").get<std::string>();
        const auto shape = cell.at("shape").get<std::string>();
        c.color = static_cast<int>(std::find(kColors.begin(), kColors.end(), color) - kColors.begin());
        c.shape = static_cast<int>(std::find(kShapes.begin(), kShapes.end(), shape) - kShapes.begin());
        check(c.color < kNumColors && c.shape < kNumShapes, ErrorCode::UnknownSymbol, "unknown cell " + cell.dump());
      }
      img.cells.push_back(c);
    }
  }
  return img;
}

inline nlohmann::json to_json(const Sample& s) {
  return {{"image", image_to_json(s.image)},
          {"instruction", s.instruction},
          {"response", s.response},
          {"tag", tag_name(s.tag)}};
}

inline nlohmann::json to_json(const PreferencePair& p) {
  return {{"image", image_to_json(p.image)},
          {"instruction", p.instruction},
          {"chosen", p.chosen},
          {"rejected", p.rejected},
          {"corruption", corruption_name(p.corruption)}};
}

inline Sample sample_from_json(const nlohmann::json& j) {
  return {image_from_json(j.at("image")), j.at("instruction").get<std::string>(), j.at("response").get<std::string>(),
          parse_tag(j.at("tag").get<std::string>())};
}

inline PreferencePair pair_from_json(const nlohmann::json& j) {
  return {image_from_json(j.at("image")), j.at("instruction").get<std::string>(), j.at("chosen").get<std::string>(),
          j.at("rejected").get<std::string>(), parse_corruption(j.at("corruption").get<std::string>())};
}

template <class Record>
void write_jsonl(std::ostream& os, const std::vector<Record>& records) {
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

template <class Record>
void write_jsonl(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(f.good(), ErrorCode::InvalidConfig, "cannot write " + path.string());
  write_jsonl(f, records);
}

inline std::vector<nlohmann::json> read_jsonl_lines(std::istream& is) {
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidConfig, std::string("malformed JSONL record: ") + e.what());
    }
  }
  return out;
}

inline std::vector<Sample> read_samples_jsonl(std::istream& is) {
  std::vector<Sample> out;
  for (const auto& j : read_jsonl_lines(is)) out.push_back(sample_from_json(j));
  return out;
}

inline std::vector<PreferencePair> read_pairs_jsonl(std::istream& is) {
  std::vector<PreferencePair> out;
  for (const auto& j : read_jsonl_lines(is)) out.push_back(pair_from_json(j));
  return out;
}

template <class Reader>
auto read_jsonl_file(const std::filesystem::path& path, Reader reader) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorCode::InvalidConfig, "cannot read " + path.string());
  return reader(f);
}

inline std::vector<Sample> read_samples_jsonl(const std::filesystem::path& path) {
  return read_jsonl_file(path, [](std::istream& is) { return read_samples_jsonl(is); });
}

inline std::vector<PreferencePair> read_pairs_jsonl(const std::filesystem::path& path) {
  return read_jsonl_file(path, [](std::istream& is) { return read_pairs_jsonl(is); });
}

}  // namespace tinymoe::data
