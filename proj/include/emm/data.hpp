// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "emm/errors.hpp"
#include "emm/graph.hpp"
#include "emm/model.hpp"
#include "emm/rng.hpp"
#include "emm/tensor.hpp"

namespace emm {

enum class Split : uint8_t { train = 0, val = 1, test = 2 };

enum class ColumnRole { dense, sparse, label };

struct ColumnSpec {
  std::string name;
  ColumnRole role = ColumnRole::dense;
  std::string task;            // label columns: task name
  uint32_t embedding_dim = 4;  // sparse columns
};

struct FeatureSpec {
  std::vector<ColumnSpec> columns;

  std::vector<const ColumnSpec*> of_role(ColumnRole role) const {
    std::vector<const ColumnSpec*> out;
    for (const ColumnSpec& c : columns) {
      if (c.role == role) out.push_back(&c);
    }
    return out;
  }

  void validate() const {
    if (of_role(ColumnRole::label).empty()) {
      raise(ErrorCode::config, "feature spec needs at least one label column");
    }
    std::set<std::string> names;
    for (const ColumnSpec& c : columns) {
      if (c.name.empty()) raise(ErrorCode::config, "unnamed column in spec");
      if (!names.insert(c.name).second) {
        raise(ErrorCode::config, "duplicate column " + c.name);
      }
      if (c.role == ColumnRole::label && c.task.empty()) {
        raise(ErrorCode::config, "label column " + c.name + " names no task");
      }
      if (c.role == ColumnRole::sparse && c.embedding_dim == 0) {
        raise(ErrorCode::config, "sparse column " + c.name + " needs embedding dim");
      }
    }
  }
};

/// Preprocessed tabular data: z-scored dense values, integer codes for
/// sparse values, one binary label vector per task, and a per-row split tag.
/// Normalization statistics and vocabularies come from the train split only;
/// a sparse value unseen in training maps to the reserved last code.
struct TaskDataset {
  FeatureSpec spec;
  std::vector<std::string> tasks;
  size_t n_rows = 0;
  size_t dense_width = 0;
  std::vector<double> dense;  // row-major [n_rows x dense_width]
  std::vector<std::vector<size_t>> codes;        // [sparse column][row]
  std::vector<std::vector<double>> labels;       // [task][row]
  std::vector<uint8_t> split_tag;                // Split values
  std::vector<std::vector<std::string>> vocabs;  // per sparse column
  std::vector<double> dense_mean;
  std::vector<double> dense_std;

  std::vector<size_t> rows_of(Split s) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < n_rows; ++i) {
      if (split_tag[i] == static_cast<uint8_t>(s)) out.push_back(i);
    }
    return out;
  }

  std::vector<double> labels_at(size_t task, const std::vector<size_t>& rows) const {
    std::vector<double> out;
    out.reserve(rows.size());
    for (size_t r : rows) out.push_back(labels[task][r]);
    return out;
  }

  /// Vocabulary size plus the reserved out-of-vocabulary slot.
  size_t table_rows(size_t sparse_col) const { return vocabs[sparse_col].size() + 1; }
};

namespace detail {

struct RawColumns {
  std::vector<std::vector<double>> dense;       // [col][row]
  std::vector<std::vector<std::string>> sparse; // [col][row]
  std::vector<std::vector<double>> labels;      // [task][row]
};

/// Shared preprocessing tail: seeded split, train-only statistics and
/// vocabularies, then encoding.
inline TaskDataset finalize_dataset(const FeatureSpec& spec,
                                    std::vector<std::string> tasks,
                                    RawColumns raw, uint64_t seed) {
  TaskDataset ds;
  ds.spec = spec;
  ds.tasks = std::move(tasks);
  ds.dense_width = raw.dense.size();
  ds.n_rows = raw.labels.at(0).size();
  if (ds.n_rows == 0) raise(ErrorCode::data, "dataset has no rows");

  std::vector<size_t> perm(ds.n_rows);
  for (size_t i = 0; i < ds.n_rows; ++i) perm[i] = i;
  RandomStream rs = stream_for(seed, "data/split");
  rs.shuffle(perm);
  size_t n_test = ds.n_rows / 5;
  size_t n_val = (ds.n_rows - n_test) / 10;
  ds.split_tag.assign(ds.n_rows, static_cast<uint8_t>(Split::train));
  for (size_t i = 0; i < n_test; ++i) {
    ds.split_tag[perm[i]] = static_cast<uint8_t>(Split::test);
  }
  for (size_t i = n_test; i < n_test + n_val; ++i) {
    ds.split_tag[perm[i]] = static_cast<uint8_t>(Split::val);
  }

  std::vector<size_t> train_rows = ds.rows_of(Split::train);
  if (train_rows.empty()) raise(ErrorCode::data, "no training rows after split");

  for (size_t c = 0; c < raw.dense.size(); ++c) {
    double mean = 0.0;
    for (size_t r : train_rows) mean += raw.dense[c][r];
    mean /= static_cast<double>(train_rows.size());
    double var = 0.0;
    for (size_t r : train_rows) {
      double d = raw.dense[c][r] - mean;
      var += d * d;
    }
    var /= static_cast<double>(train_rows.size());
    ds.dense_mean.push_back(mean);
    ds.dense_std.push_back(std::sqrt(var));
  }
  ds.dense.assign(ds.n_rows * ds.dense_width, 0.0);
  for (size_t c = 0; c < ds.dense_width; ++c) {
    double sd = ds.dense_std[c];
    for (size_t r = 0; r < ds.n_rows; ++r) {
      ds.dense[r * ds.dense_width + c] =
          sd == 0.0 ? 0.0 : (raw.dense[c][r] - ds.dense_mean[c]) / sd;
    }
  }

  for (size_t c = 0; c < raw.sparse.size(); ++c) {
    std::set<std::string> seen;
    for (size_t r : train_rows) seen.insert(raw.sparse[c][r]);
    std::vector<std::string> vocab(seen.begin(), seen.end());
    std::vector<size_t> col(ds.n_rows);
    for (size_t r = 0; r < ds.n_rows; ++r) {
      auto it = std::lower_bound(vocab.begin(), vocab.end(), raw.sparse[c][r]);
      col[r] = (it != vocab.end() && *it == raw.sparse[c][r])
                   ? static_cast<size_t>(it - vocab.begin())
                   : vocab.size();  // OOV
    }
    ds.vocabs.push_back(std::move(vocab));
    ds.codes.push_back(std::move(col));
  }

  ds.labels = std::move(raw.labels);
  return ds;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) {
    while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) {
      field.pop_back();
    }
    size_t start = field.find_first_not_of(' ');
    fields.push_back(start == std::string::npos ? "" : field.substr(start));
  }
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

inline double parse_double(const std::string& s, size_t row, const std::string& col) {
  try {
    size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    raise(ErrorCode::data, "row " + std::to_string(row) + " column " + col +
                               ": cannot parse '" + s + "' as a number");
  }
}

}  // namespace detail

/// Reads a header CSV into a preprocessed dataset. Every spec column must be
/// present; dense and label cells must parse as numbers and labels must be
/// 0 or 1.
inline TaskDataset ingest_csv(const std::string& path, const FeatureSpec& spec,
                              uint64_t seed) {
  spec.validate();
  std::ifstream in(path);
  if (!in) raise(ErrorCode::data, "cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) raise(ErrorCode::data, path + " is empty");
  std::vector<std::string> names = detail::split_csv_line(header);

  auto csv_index = [&](const std::string& name) {
    for (size_t c = 0; c < names.size(); ++c) {
      if (names[c] == name) return c;
    }
    raise(ErrorCode::data, "missing column " + name + " in " + path);
  };
  std::vector<const ColumnSpec*> dense_cols = spec.of_role(ColumnRole::dense);
  std::vector<const ColumnSpec*> sparse_cols = spec.of_role(ColumnRole::sparse);
  std::vector<const ColumnSpec*> label_cols = spec.of_role(ColumnRole::label);
  std::vector<size_t> dense_idx, sparse_idx, label_idx;
  for (const ColumnSpec* c : dense_cols) dense_idx.push_back(csv_index(c->name));
  for (const ColumnSpec* c : sparse_cols) sparse_idx.push_back(csv_index(c->name));
  for (const ColumnSpec* c : label_cols) label_idx.push_back(csv_index(c->name));

  detail::RawColumns raw;
  raw.dense.resize(dense_cols.size());
  raw.sparse.resize(sparse_cols.size());
  raw.labels.resize(label_cols.size());

  std::string line;
  size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> fields = detail::split_csv_line(line);
    if (fields.size() != names.size()) {
      raise(ErrorCode::data, "row " + std::to_string(row) + " has " +
                                 std::to_string(fields.size()) + " fields, header has " +
                                 std::to_string(names.size()));
    }
    for (size_t c = 0; c < dense_cols.size(); ++c) {
      raw.dense[c].push_back(detail::parse_double(fields[dense_idx[c]], row,
                                                  dense_cols[c]->name));
    }
    for (size_t c = 0; c < sparse_cols.size(); ++c) {
      raw.sparse[c].push_back(fields[sparse_idx[c]]);
    }
    for (size_t c = 0; c < label_cols.size(); ++c) {
      double v = detail::parse_double(fields[label_idx[c]], row, label_cols[c]->name);
      if (v != 0.0 && v != 1.0) {
        raise(ErrorCode::data, "row " + std::to_string(row) + " column " +
                                   label_cols[c]->name + ": label must be 0 or 1");
      }
      raw.labels[c].push_back(v);
    }
  }
  if (row == 0) raise(ErrorCode::data, path + " has a header but no rows");

  std::vector<std::string> tasks;
  for (const ColumnSpec* c : label_cols) tasks.push_back(c->task);
  return detail::finalize_dataset(spec, std::move(tasks), std::move(raw), seed);
}

constexpr size_t kSyntheticDim = 16;

/// Gaussian features with one linear-threshold label per task. Task weight
/// vectors are unit length with pairwise cosine similarity rho, built as
/// sqrt(rho)*u + sqrt(1-rho)*v_t over an orthonormal frame {u, v_1, ...}.
inline TaskDataset make_synthetic(size_t n_rows, size_t n_tasks, double rho,
                                  uint64_t seed) {
  if (n_tasks == 0) raise(ErrorCode::config, "need at least one task");
  if (n_tasks + 1 > kSyntheticDim) {
    raise(ErrorCode::config, "too many tasks for the synthetic feature dim");
  }
  if (rho < 0.0 || rho > 1.0) {
    raise(ErrorCode::config, "correlation must lie in [0,1]");
  }

  // Orthonormal frame via Gram-Schmidt over seeded Gaussian draws.
  RandomStream ws = stream_for(seed, "synthetic/frame");
  std::vector<std::vector<double>> frame;
  while (frame.size() < n_tasks + 1) {
    std::vector<double> v(kSyntheticDim);
    for (double& x : v) x = ws.normal();
    for (const auto& u : frame) {
      double dot = 0.0;
      for (size_t i = 0; i < kSyntheticDim; ++i) dot += v[i] * u[i];
      for (size_t i = 0; i < kSyntheticDim; ++i) v[i] -= dot * u[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;
    for (double& x : v) x /= norm;
    frame.push_back(std::move(v));
  }
  std::vector<std::vector<double>> w(n_tasks, std::vector<double>(kSyntheticDim));
  double a = std::sqrt(rho), b = std::sqrt(1.0 - rho);
  for (size_t t = 0; t < n_tasks; ++t) {
    for (size_t i = 0; i < kSyntheticDim; ++i) {
      w[t][i] = a * frame[0][i] + b * frame[t + 1][i];
    }
  }

  detail::RawColumns raw;
  raw.dense.assign(kSyntheticDim, {});
  raw.labels.assign(n_tasks, {});
  RandomStream xs = stream_for(seed, "synthetic/rows");
  constexpr double kNoise = 0.05;
  std::vector<double> x(kSyntheticDim);
  for (size_t r = 0; r < n_rows; ++r) {
    for (size_t i = 0; i < kSyntheticDim; ++i) {
      x[i] = xs.normal();
      raw.dense[i].push_back(x[i]);
    }
    for (size_t t = 0; t < n_tasks; ++t) {
      double s = 0.0;
      for (size_t i = 0; i < kSyntheticDim; ++i) s += w[t][i] * x[i];
      raw.labels[t].push_back(s + kNoise * xs.normal() > 0.0 ? 1.0 : 0.0);
    }
  }

  FeatureSpec spec;
  std::vector<std::string> tasks;
  for (size_t i = 0; i < kSyntheticDim; ++i) {
    spec.columns.push_back({"x" + std::to_string(i), ColumnRole::dense, "", 4});
  }
  for (size_t t = 0; t < n_tasks; ++t) {
    std::string name = "task" + std::to_string(t + 1);
    spec.columns.push_back({name, ColumnRole::label, name, 4});
    tasks.push_back(name);
  }
  return detail::finalize_dataset(spec, std::move(tasks), std::move(raw), seed);
}

/// Census-shaped generator: 7 dense and 33 sparse features, all noisy views
/// of an 8-dim latent, with two correlated binary labels (income-like at a
/// 25% positive rate, marital-like at 45%, label-weight cosine 0.6).
inline TaskDataset make_census_like(size_t n_rows, uint64_t seed) {
  constexpr size_t kLatent = 8;
  constexpr size_t kDense = 7;
  constexpr size_t kSparse = 33;

  RandomStream ws = stream_for(seed, "census/frame");
  auto unit_vec = [&]() {
    std::vector<double> v(kLatent);
    double norm = 0.0;
    for (double& x : v) {
      x = ws.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
  };
  std::vector<double> u = unit_vec();
  std::vector<double> v2 = unit_vec();
  double dot = 0.0;
  for (size_t i = 0; i < kLatent; ++i) dot += v2[i] * u[i];
  double norm = 0.0;
  for (size_t i = 0; i < kLatent; ++i) {
    v2[i] -= dot * u[i];
    norm += v2[i] * v2[i];
  }
  norm = std::sqrt(norm);
  for (double& x : v2) x /= norm;
  std::vector<std::vector<double>> label_w(2, std::vector<double>(kLatent));
  constexpr double kLabelCos = 0.6;
  for (size_t i = 0; i < kLatent; ++i) {
    label_w[0][i] = u[i];
    label_w[1][i] = kLabelCos * u[i] + std::sqrt(1.0 - kLabelCos * kLabelCos) * v2[i];
  }
  // Thresholds on a standard normal score: 25% and 45% positive rates.
  const double thresholds[2] = {0.6745, 0.1257};

  std::vector<std::vector<double>> dense_w;
  for (size_t c = 0; c < kDense; ++c) dense_w.push_back(unit_vec());
  std::vector<std::vector<double>> sparse_w;
  for (size_t c = 0; c < kSparse; ++c) sparse_w.push_back(unit_vec());
  std::vector<size_t> vocab_size;
  for (size_t c = 0; c < kSparse; ++c) vocab_size.push_back(3 + (c % 10));

  detail::RawColumns raw;
  raw.dense.assign(kDense, {});
  raw.sparse.assign(kSparse, {});
  raw.labels.assign(2, {});
  RandomStream xs = stream_for(seed, "census/rows");
  constexpr double kViewNoise = 0.3;
  constexpr double kLabelNoise = 0.2;
  const double bucket_sigma = std::sqrt(1.0 + kViewNoise * kViewNoise);
  std::vector<double> z(kLatent);
  for (size_t r = 0; r < n_rows; ++r) {
    for (double& x : z) x = xs.normal();
    for (size_t c = 0; c < kDense; ++c) {
      double s = 0.0;
      for (size_t i = 0; i < kLatent; ++i) s += dense_w[c][i] * z[i];
      raw.dense[c].push_back(s + kViewNoise * xs.normal());
    }
    for (size_t c = 0; c < kSparse; ++c) {
      double s = 0.0;
      for (size_t i = 0; i < kLatent; ++i) s += sparse_w[c][i] * z[i];
      s += kViewNoise * xs.normal();
      double cdf = 0.5 * (1.0 + std::erf(s / (bucket_sigma * std::sqrt(2.0))));
      size_t bucket = std::min(
          vocab_size[c] - 1,
          static_cast<size_t>(cdf * static_cast<double>(vocab_size[c])));
      raw.sparse[c].push_back("c" + std::to_string(bucket));
    }
    for (size_t t = 0; t < 2; ++t) {
      double s = 0.0;
      for (size_t i = 0; i < kLatent; ++i) s += label_w[t][i] * z[i];
      raw.labels[t].push_back(s + kLabelNoise * xs.normal() > thresholds[t] ? 1.0
                                                                            : 0.0);
    }
  }

  FeatureSpec spec;
  for (size_t c = 0; c < kDense; ++c) {
    spec.columns.push_back({"d" + std::to_string(c), ColumnRole::dense, "", 4});
  }
  for (size_t c = 0; c < kSparse; ++c) {
    spec.columns.push_back({"s" + std::to_string(c), ColumnRole::sparse, "", 4});
  }
  spec.columns.push_back({"income", ColumnRole::label, "income", 4});
  spec.columns.push_back({"marital", ColumnRole::label, "marital", 4});
  return detail::finalize_dataset(spec, {"income", "marital"}, std::move(raw), seed);
}

/// Learned input encoding: dense features pass through, each sparse feature
/// looks up a small embedding, and everything concatenates. The tables train
/// jointly with the first single-task model, then freeze; every later model
/// consumes the frozen encoding.
struct InputEncoder {
  struct Table {
    VarPtr weights;  // [vocab+1, dim]
    VarPtr bias;     // [dim]
    uint32_t rows = 0;
    uint32_t dim = 0;
  };
  size_t dense_width = 0;
  std::vector<Table> tables;

  uint32_t encoded_width() const {
    uint32_t w = static_cast<uint32_t>(dense_width);
    for (const Table& t : tables) w += t.dim;
    return w;
  }

  void set_frozen(bool frozen) {
    for (Table& t : tables) {
      t.weights->needs_grad = !frozen;
      t.bias->needs_grad = !frozen;
    }
  }

  std::vector<std::pair<std::string, VarPtr>> trainables() const {
    std::vector<std::pair<std::string, VarPtr>> out;
    for (size_t i = 0; i < tables.size(); ++i) {
      out.emplace_back("encoder/table" + std::to_string(i) + "/w", tables[i].weights);
      out.emplace_back("encoder/table" + std::to_string(i) + "/b", tables[i].bias);
    }
    return out;
  }
};

inline InputEncoder make_input_encoder(const TaskDataset& ds, uint64_t seed) {
  InputEncoder enc;
  enc.dense_width = ds.dense_width;
  std::vector<const ColumnSpec*> sparse_cols = ds.spec.of_role(ColumnRole::sparse);
  for (size_t c = 0; c < ds.codes.size(); ++c) {
    InputEncoder::Table t;
    t.rows = static_cast<uint32_t>(ds.table_rows(c));
    t.dim = sparse_cols[c]->embedding_dim;
    std::string pid = "encoder/table" + std::to_string(c);
    t.weights = make_leaf(
        detail::init_dense_weights(t.rows, t.dim, false, seed, pid + "/w"), true);
    t.bias = make_leaf(Tensor::zeros({t.dim}), true);
    enc.tables.push_back(std::move(t));
  }
  return enc;
}

/// Encoded batch for the given rows, differentiable through the tables.
inline VarPtr encoder_batch(const InputEncoder& enc, const TaskDataset& ds,
                            const std::vector<size_t>& rows) {
  if (rows.empty()) raise(ErrorCode::usage, "empty batch");
  std::vector<VarPtr> parts;
  if (ds.dense_width > 0) {
    Tensor d({rows.size(), ds.dense_width});
    for (size_t r = 0; r < rows.size(); ++r) {
      for (size_t c = 0; c < ds.dense_width; ++c) {
        d.at(r, c) = ds.dense[rows[r] * ds.dense_width + c];
      }
    }
    parts.push_back(make_leaf(std::move(d), false));
  }
  for (size_t c = 0; c < enc.tables.size(); ++c) {
    std::vector<size_t> batch_codes;
    batch_codes.reserve(rows.size());
    for (size_t r : rows) batch_codes.push_back(ds.codes[c][r]);
    parts.push_back(add_rowvec(embed_rows(enc.tables[c].weights, batch_codes),
                               enc.tables[c].bias));
  }
  if (parts.empty()) raise(ErrorCode::config, "dataset has no feature columns");
  return parts.size() == 1 ? parts[0] : hstack(parts);
}

/// Snapshot encoding of the whole dataset under the current table values.
inline Tensor encode_dataset(const InputEncoder& enc, const TaskDataset& ds) {
  std::vector<size_t> all(ds.n_rows);
  for (size_t i = 0; i < ds.n_rows; ++i) all[i] = i;
  return encoder_batch(enc, ds, all)->value;
}

inline Tensor rows_subset(const Tensor& features, const std::vector<size_t>& rows) {
  if (rows.empty()) raise(ErrorCode::usage, "empty row subset");
  Tensor out({rows.size(), features.cols()});
  for (size_t r = 0; r < rows.size(); ++r) {
    for (size_t c = 0; c < features.cols(); ++c) {
      out.at(r, c) = features.at(rows[r], c);
    }
  }
  return out;
}

/// The encoder stored as a parameter bag in the model file format: one
/// embedding layer per table, no head.
inline TrainedModel encoder_to_model(const InputEncoder& enc) {
  TrainedModel m;
  m.id = "encoder";
  m.task = "__encoder__";
  m.head_index = kNoHead;
  for (const InputEncoder::Table& t : enc.tables) {
    ModelLayer l;
    l.sig = embedding_sig(t.rows, t.dim);
    l.weights = t.weights;
    l.bias = t.bias;
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline InputEncoder encoder_from_model(const TrainedModel& m, size_t dense_width) {
  InputEncoder enc;
  enc.dense_width = dense_width;
  for (const ModelLayer& l : m.layers) {
    if (l.sig.kind != LayerKind::embedding_concat) {
      raise(ErrorCode::format, "encoder file holds a non-embedding layer");
    }
    InputEncoder::Table t;
    t.rows = l.sig.in_dim;
    t.dim = l.sig.out_dim;
    t.weights = l.weights;
    t.bias = l.bias;
    enc.tables.push_back(std::move(t));
  }
  return enc;
}

}  // namespace emm
