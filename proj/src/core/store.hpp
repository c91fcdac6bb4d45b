#pragma once

// On-disk layered embedding store.
//
// A store is a pair of files sharing a basename:
//   <name>.ssch  binary payload (header, labels, embeddings)
//   <name>.json  manifest sidecar
//
// Binary layout, all integers little-endian:
//   offset  0  magic "SSCH"            4 bytes
//   offset  4  version                 u64
//   offset 12  n_tokens                u64
//   offset 20  n_layers                u64
//   offset 28  dim                     u64
//   offset 36  CRC-32 of the payload   u32
//   offset 40  labels                  u32 x n_tokens
//              embeddings              f32 x n_tokens x n_layers x dim
// Embeddings are token-major, then layer, then dimension. Layer 0 is the
// non-contextualized embedding layer.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace ssch::store {

inline constexpr char kMagic[4] = {'S', 'S', 'C', 'H'};
inline constexpr std::uint64_t kFormatVersion = 1;
inline constexpr int kManifestSchemaVersion = 1;
inline constexpr std::size_t kHeaderSize = 40;

struct IndexRange {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;  // exclusive

  std::uint64_t size() const { return end - begin; }
};

struct Split {
  std::string name;
  std::vector<IndexRange> ranges;
};

struct StoreManifest {
  int schema_version = kManifestSchemaVersion;
  std::string task_name;
  std::uint64_t n_tokens = 0;
  std::uint64_t n_layers = 0;
  std::uint64_t dim = 0;
  std::uint64_t n_classes = 0;
  std::vector<std::string> label_vocab;
  std::vector<Split> splits;  // manifest order is preserved
  std::string provenance;

  // Throws ssch::Error(InvalidArgument) on any violated invariant.
  void validate() const;

  const Split* find_split(const std::string& name) const;

  // Split order follows the key order of the "splits" object.
  nlohmann::ordered_json to_json() const;
  static StoreManifest from_json(const nlohmann::ordered_json& j);
};

// Manifest sidecar path for a store path (same basename, .json extension).
std::filesystem::path manifest_path_for(const std::filesystem::path& store_path);

class MappedFile;

// Read-only, memory-mapped dataset. Copies share the mapping.
class EmbeddingDataset {
 public:
  static EmbeddingDataset open(const std::filesystem::path& path);

  const StoreManifest& manifest() const { return *manifest_; }
  const std::filesystem::path& path() const { return path_; }
  std::uint32_t checksum() const { return checksum_; }

  std::uint64_t n_tokens() const { return manifest_->n_tokens; }
  std::uint64_t n_layers() const { return manifest_->n_layers; }
  std::uint64_t dim() const { return manifest_->dim; }
  std::uint64_t n_classes() const { return manifest_->n_classes; }

  std::uint32_t label(std::uint64_t token) const;
  std::span<const std::uint32_t> labels() const { return labels_; }

  // Layer vector of one token; `dim()` floats.
  std::span<const float> vector(std::uint64_t token, std::uint64_t layer) const;
  // All layers of one token; `n_layers() * dim()` floats.
  std::span<const float> token(std::uint64_t token) const;

 private:
  EmbeddingDataset() = default;

  std::shared_ptr<const MappedFile> file_;
  std::shared_ptr<const StoreManifest> manifest_;
  std::filesystem::path path_;
  std::uint32_t checksum_ = 0;
  std::span<const std::uint32_t> labels_;
  std::span<const float> embeddings_;
};

// Read-only ordered selection of tokens from one split.
class DatasetView {
 public:
  DatasetView(EmbeddingDataset dataset, std::vector<std::uint64_t> indices);

  const EmbeddingDataset& dataset() const { return dataset_; }
  const std::vector<std::uint64_t>& indices() const { return indices_; }
  std::size_t size() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }

  std::uint64_t n_layers() const { return dataset_.n_layers(); }
  std::uint64_t dim() const { return dataset_.dim(); }
  std::uint64_t n_classes() const { return dataset_.n_classes(); }

  std::uint32_t label(std::size_t i) const { return dataset_.label(indices_[i]); }
  std::vector<std::uint32_t> labels() const;

 private:
  EmbeddingDataset dataset_;
  std::vector<std::uint64_t> indices_;
};

// Writes the binary store and its manifest sidecar. `embeddings` holds
// n_tokens * n_layers * dim values in store order. Returns the store path.
std::filesystem::path write_dataset(const StoreManifest& manifest,
                                    std::span<const float> embeddings,
                                    std::span<const std::uint32_t> labels,
                                    const std::filesystem::path& path);

DatasetView split_view(const EmbeddingDataset& dataset, const std::string& split);

// Every token of the dataset, in index order.
DatasetView full_view(const EmbeddingDataset& dataset);

}  // namespace ssch::store
