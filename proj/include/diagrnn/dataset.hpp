#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "diagrnn/errors.hpp"
#include "diagrnn/rng.hpp"
#include "diagrnn/tensor.hpp"

namespace diagrnn {

// One piece: a list of frames, each frame the sorted active pitch indices.
struct PianoRollSequence {
  std::vector<std::vector<int>> frames;

  int length() const { return static_cast<int>(frames.size()); }
};

enum class Split { Train, Valid, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

inline constexpr std::array<Split, 3> kSplits = {Split::Train, Split::Valid, Split::Test};

// A piano-roll dataset. Freshly loaded files use the raw pitch space
// declared in the header (pitch_map empty); prune_pitches() rewrites
// everything into the dense space of pitches that are actually active and
// records the dense-index -> raw-pitch map.
struct Dataset {
  std::string name;
  int pitch_count = 0;
  std::vector<int> pitch_map;  // dense index -> raw pitch; empty before pruning
  std::array<std::vector<PianoRollSequence>, 3> splits;

  std::vector<PianoRollSequence>& split(Split s) { return splits[static_cast<int>(s)]; }
  const std::vector<PianoRollSequence>& split(Split s) const { return splits[static_cast<int>(s)]; }

  long total_frames() const {
    long n = 0;
    for (const auto& sp : splits)
      for (const auto& seq : sp) n += seq.length();
    return n;
  }
};

namespace detail {

inline std::string read_whole_file(const std::string& path) {
  if (path.size() > 3 && path.substr(path.size() - 3) == ".gz") {
    gzFile gz = gzopen(path.c_str(), "rb");
    if (!gz) throw ParseError(path + ": cannot open");
    std::string out;
    char buf[1 << 16];
    int n;
    while ((n = gzread(gz, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(n));
    const bool bad = n < 0;
    gzclose(gz);
    if (bad) throw ParseError(path + ": gzip read error");
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline int parse_pitch(std::string_view token, const std::string& ctx, int p_raw) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc{} || ptr != token.data() + token.size())
    throw ParseError(ctx + ": bad pitch '" + std::string(token) + "'");
  if (v < 0 || v >= p_raw)
    throw ParseError(ctx + ": pitch " + std::to_string(v) + " outside [0," + std::to_string(p_raw) + ")");
  return v;
}

inline PianoRollSequence parse_sequence(std::string_view line, const std::string& ctx, int p_raw) {
  PianoRollSequence seq;
  std::size_t start = 0;
  while (true) {
    const std::size_t semi = line.find(';', start);
    const std::string_view field =
        line.substr(start, semi == std::string_view::npos ? std::string_view::npos : semi - start);
    std::vector<int> frame;
    if (!field.empty()) {
      std::size_t fs = 0;
      while (true) {
        const std::size_t comma = field.find(',', fs);
        const std::string_view tok =
            field.substr(fs, comma == std::string_view::npos ? std::string_view::npos : comma - fs);
        frame.push_back(parse_pitch(tok, ctx, p_raw));
        if (comma == std::string_view::npos) break;
        fs = comma + 1;
      }
      // Binarize: duplicate pitches in a frame collapse to one.
      std::sort(frame.begin(), frame.end());
      frame.erase(std::unique(frame.begin(), frame.end()), frame.end());
    }
    seq.frames.push_back(std::move(frame));
    if (semi == std::string_view::npos) break;
    start = semi + 1;
  }
  return seq;
}

}  // namespace detail

// Interchange text format, one dataset per file:
//   #dataset <name> <P_raw>
//   #split train|valid|test
//   one sequence per line, frames separated by ';', each frame a
//   comma-separated list of active pitch indices (empty field = silence)
// UTF-8, LF line endings, no trailing separators. Files ending in .gz are
// transparently decompressed.
inline Dataset load_dataset(const std::string& path) {
  const std::string text = detail::read_whole_file(path);
  Dataset ds;
  std::array<bool, 3> seen = {false, false, false};
  int current = -1;
  int lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos && pos == text.size()) break;  // trailing newline
    std::string_view line(text.data() + pos, (nl == std::string::npos ? text.size() : nl) - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    ++lineno;
    const std::string ctx = path + ":" + std::to_string(lineno);
    if (line.find('\r') != std::string_view::npos)
      throw ParseError(ctx + ": CR found; the format requires LF line endings");
    if (lineno == 1) {
      std::istringstream hdr{std::string(line)};
      std::string tag;
      int p = 0;
      if (!(hdr >> tag >> ds.name >> p) || tag != "#dataset" || p < 1 || (hdr >> tag))
        throw ParseError(ctx + ": expected '#dataset <name> <pitch_count>'");
      ds.pitch_count = p;
      continue;
    }
    if (line.rfind("#split", 0) == 0) {
      std::istringstream hdr{std::string(line)};
      std::string tag, which;
      if (!(hdr >> tag >> which) || (hdr >> tag))
        throw ParseError(ctx + ": expected '#split train|valid|test'");
      int idx;
      if (which == "train") idx = 0;
      else if (which == "valid") idx = 1;
      else if (which == "test") idx = 2;
      else throw ParseError(ctx + ": unknown split '" + which + "'");
      if (seen[idx]) throw ParseError(ctx + ": duplicate split '" + which + "'");
      seen[idx] = true;
      current = idx;
      continue;
    }
    if (current < 0) throw ParseError(ctx + ": sequence before any '#split' marker");
    ds.splits[current].push_back(detail::parse_sequence(line, ctx, ds.pitch_count));
  }
  if (lineno == 0) throw ParseError(path + ": empty file");
  for (int i = 0; i < 3; ++i)
    if (!seen[i]) throw ParseError(path + ": missing '#split " + split_name(kSplits[i]) + "'");
  return ds;
}

// Canonical serialization; a canonical file round-trips byte for byte.
inline std::string serialize_dataset(const Dataset& ds) {
  std::string out = "#dataset " + ds.name + " " + std::to_string(ds.pitch_count) + "\n";
  for (Split s : kSplits) {
    out += std::string("#split ") + split_name(s) + "\n";
    for (const auto& seq : ds.split(s)) {
      for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        if (t) out += ';';
        const auto& frame = seq.frames[t];
        for (std::size_t i = 0; i < frame.size(); ++i) {
          if (i) out += ',';
          out += std::to_string(frame[i]);
        }
      }
      out += '\n';
    }
  }
  return out;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot write");
  out << serialize_dataset(ds);
}

// Human-readable load summary; empty splits are accepted but called out.
inline std::string dataset_report(const Dataset& ds) {
  std::string out = "dataset " + ds.name + ": " + std::to_string(ds.pitch_count) + " pitches\n";
  for (Split s : kSplits) {
    const auto& seqs = ds.split(s);
    long frames = 0;
    for (const auto& q : seqs) frames += q.length();
    out += std::string("  ") + split_name(s) + ": " + std::to_string(seqs.size()) + " sequences, " +
           std::to_string(frames) + " frames";
    if (seqs.empty()) out += "  [warning: empty split]";
    out += "\n";
  }
  return out;
}

// Drop pitch bins with no activity anywhere in the dataset (union over all
// three splits) and re-index the rest densely.
inline Dataset prune_pitches(const Dataset& raw) {
  std::vector<char> active(static_cast<std::size_t>(raw.pitch_count), 0);
  for (const auto& sp : raw.splits)
    for (const auto& seq : sp)
      for (const auto& frame : seq.frames)
        for (int p : frame) active[static_cast<std::size_t>(p)] = 1;

  std::vector<int> dense_of(static_cast<std::size_t>(raw.pitch_count), -1);
  Dataset out;
  out.name = raw.name;
  for (int p = 0; p < raw.pitch_count; ++p) {
    if (active[static_cast<std::size_t>(p)]) {
      dense_of[static_cast<std::size_t>(p)] = static_cast<int>(out.pitch_map.size());
      out.pitch_map.push_back(p);
    }
  }
  if (out.pitch_map.empty()) throw DataError("prune_pitches: no active pitches in dataset '" + raw.name + "'");
  out.pitch_count = static_cast<int>(out.pitch_map.size());
  for (int i = 0; i < 3; ++i) {
    out.splits[i].reserve(raw.splits[i].size());
    for (const auto& seq : raw.splits[i]) {
      PianoRollSequence q;
      q.frames.reserve(seq.frames.size());
      for (const auto& frame : seq.frames) {
        std::vector<int> f;
        f.reserve(frame.size());
        for (int p : frame) f.push_back(dense_of[static_cast<std::size_t>(p)]);
        q.frames.push_back(std::move(f));
      }
      out.splits[i].push_back(std::move(q));
    }
  }
  return out;
}

// Greedy chunking: sequences longer than max_len are split into chunks of
// exactly max_len with the remainder last, in place in the sequence list.
// No state is carried across chunk boundaries downstream.
inline Dataset split_long(const Dataset& ds, int max_len = 200) {
  if (max_len < 2) throw ConfigError("split_long: max_len must be >= 2, got " + std::to_string(max_len));
  Dataset out;
  out.name = ds.name;
  out.pitch_count = ds.pitch_count;
  out.pitch_map = ds.pitch_map;
  for (int i = 0; i < 3; ++i) {
    for (const auto& seq : ds.splits[i]) {
      int t = 0;
      while (t < seq.length()) {
        const int n = std::min(max_len, seq.length() - t);
        PianoRollSequence chunk;
        chunk.frames.assign(seq.frames.begin() + t, seq.frames.begin() + t + n);
        out.splits[i].push_back(std::move(chunk));
        t += n;
      }
    }
  }
  return out;
}

// A padded mini-batch in time-major layout: row t*batch + b is frame t of
// sequence b. Targets are the next frame (teacher forcing); mask is 1 on
// rows that have a real (non-padding) target, so a length-n sequence
// contributes n-1 target frames and the final frame is target-less.
struct Batch {
  Tensor inputs;   // (batch*time_steps) x P
  Tensor targets;  // same shape
  Tensor mask;     // (batch*time_steps) x 1
  int batch = 0;
  int time_steps = 0;

  int valid_sequences() const {
    int n = 0;
    for (int b = 0; b < batch; ++b) {
      for (int t = 0; t < time_steps; ++t) {
        if (mask.at(t * batch + b, 0) != 0.0) {
          ++n;
          break;
        }
      }
    }
    return n;
  }
};

inline std::vector<Batch> make_batches(const std::vector<PianoRollSequence>& split, int pitch_count,
                                       int batch_size, std::uint64_t seed, bool shuffle) {
  if (split.empty()) throw UsageError("make_batches: empty split");
  if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
  std::vector<int> order(split.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  if (shuffle) {
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  }
  std::vector<Batch> out;
  for (std::size_t g = 0; g < order.size(); g += static_cast<std::size_t>(batch_size)) {
    const int b_count = static_cast<int>(std::min<std::size_t>(batch_size, order.size() - g));
    int t_max = 0;
    for (int b = 0; b < b_count; ++b)
      t_max = std::max(t_max, split[static_cast<std::size_t>(order[g + static_cast<std::size_t>(b)])].length());
    Batch batch;
    batch.batch = b_count;
    batch.time_steps = t_max;
    batch.inputs = Tensor::zeros(b_count * t_max, pitch_count);
    batch.targets = Tensor::zeros(b_count * t_max, pitch_count);
    batch.mask = Tensor::zeros(b_count * t_max, 1);
    for (int b = 0; b < b_count; ++b) {
      const auto& seq = split[static_cast<std::size_t>(order[g + static_cast<std::size_t>(b)])];
      for (int t = 0; t < seq.length(); ++t) {
        const int row = t * b_count + b;
        for (int p : seq.frames[static_cast<std::size_t>(t)]) batch.inputs.at(row, p) = 1.0;
        if (t + 1 < seq.length()) {
          for (int p : seq.frames[static_cast<std::size_t>(t) + 1]) batch.targets.at(row, p) = 1.0;
          batch.mask.at(row, 0) = 1.0;
        }
      }
    }
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace diagrnn
