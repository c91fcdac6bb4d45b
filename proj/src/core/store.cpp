#include "store.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "error.hpp"

static_assert(std::endian::native == std::endian::little,
              "store I/O assumes a little-endian host");

namespace ssch::store {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

void StoreManifest::validate() const {
  if (schema_version != kManifestSchemaVersion)
    throw format_error("unsupported manifest schema_version " +
                       std::to_string(schema_version));
  if (n_tokens < 1) throw invalid_argument("manifest: n_tokens must be >= 1");
  if (n_layers < 1) throw invalid_argument("manifest: n_layers must be >= 1");
  if (dim < 1) throw invalid_argument("manifest: dim must be >= 1");
  if (n_classes < 2) throw invalid_argument("manifest: n_classes must be >= 2");
  if (label_vocab.size() != n_classes)
    throw invalid_argument("manifest: label_vocab size " +
                           std::to_string(label_vocab.size()) + " != n_classes " +
                           std::to_string(n_classes));

  std::set<std::string> names;
  std::vector<IndexRange> all;
  for (const auto& split : splits) {
    if (!names.insert(split.name).second)
      throw invalid_argument("manifest: duplicate split '" + split.name + "'");
    for (const auto& r : split.ranges) {
      if (r.begin >= r.end || r.end > n_tokens)
        throw invalid_argument("manifest: split '" + split.name +
                               "' has range outside [0, n_tokens)");
      all.push_back(r);
    }
  }
  std::sort(all.begin(), all.end(),
            [](const IndexRange& a, const IndexRange& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < all.size(); ++i)
    if (all[i].begin < all[i - 1].end)
      throw invalid_argument("manifest: split ranges overlap");
}

const Split* StoreManifest::find_split(const std::string& name) const {
  for (const auto& s : splits)
    if (s.name == name) return &s;
  return nullptr;
}

json StoreManifest::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  j["task_name"] = task_name;
  j["n_tokens"] = n_tokens;
  j["n_layers"] = n_layers;
  j["dim"] = dim;
  j["n_classes"] = n_classes;
  j["label_vocab"] = label_vocab;
  json sj = json::object();
  for (const auto& s : splits) {
    json ranges = json::array();
    for (const auto& r : s.ranges) ranges.push_back({r.begin, r.end});
    sj[s.name] = ranges;
  }
  j["splits"] = sj;
  j["provenance"] = provenance;
  return j;
}

StoreManifest StoreManifest::from_json(const json& j) {
  StoreManifest m;
  try {
    m.schema_version = j.at("schema_version").get<int>();
    m.task_name = j.at("task_name").get<std::string>();
    m.n_tokens = j.at("n_tokens").get<std::uint64_t>();
    m.n_layers = j.at("n_layers").get<std::uint64_t>();
    m.dim = j.at("dim").get<std::uint64_t>();
    m.n_classes = j.at("n_classes").get<std::uint64_t>();
    m.label_vocab = j.at("label_vocab").get<std::vector<std::string>>();
    m.provenance = j.value("provenance", std::string{});

    for (const auto& [name, ranges] : j.at("splits").items()) {
      Split s{name, {}};
      for (const auto& r : ranges) {
        if (!r.is_array() || r.size() != 2)
          throw format_error("manifest: split range must be [begin, end)");
        s.ranges.push_back({r[0].get<std::uint64_t>(), r[1].get<std::uint64_t>()});
      }
      m.splits.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw format_error(std::string("manifest: ") + e.what());
  }
  return m;
}

fs::path manifest_path_for(const fs::path& store_path) {
  fs::path p = store_path;
  p.replace_extension(".json");
  if (p == store_path) p += ".json";
  return p;
}

// ---------------------------------------------------------------------------
// Memory mapping
// ---------------------------------------------------------------------------

class MappedFile {
 public:
  explicit MappedFile(const fs::path& path) {
    fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd_ < 0) throw io_error("cannot open '" + path.string() + "': " + std::strerror(errno));
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      throw io_error("cannot stat '" + path.string() + "'");
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
      if (p == MAP_FAILED) {
        ::close(fd_);
        throw io_error("cannot map '" + path.string() + "'");
      }
      data_ = static_cast<const std::byte*>(p);
    }
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;
  ~MappedFile() {
    if (data_) ::munmap(const_cast<std::byte*>(data_), size_);
    if (fd_ >= 0) ::close(fd_);
  }

  const std::byte* data() const { return data_; }
  std::size_t size() const { return size_; }

 private:
  int fd_ = -1;
  const std::byte* data_ = nullptr;
  std::size_t size_ = 0;
};

namespace {

template <typename T>
T read_le(const std::byte* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void append_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

std::uint32_t crc32_of(const void* data, std::size_t n, std::uint32_t crc = 0) {
  uLong c = crc;
  const auto* p = static_cast<const Bytef*>(data);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw format_error("'" + path.string() + "': " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

EmbeddingDataset EmbeddingDataset::open(const fs::path& path) {
  auto file = std::make_shared<const MappedFile>(path);
  const std::byte* base = file->data();
  const std::size_t size = file->size();

  if (size < 4 || std::memcmp(base, kMagic, 4) != 0)
    throw format_error("'" + path.string() + "': unrecognized format");
  if (size < kHeaderSize)
    throw format_error("'" + path.string() + "': truncated payload");

  const auto version = read_le<std::uint64_t>(base + 4);
  const auto n_tokens = read_le<std::uint64_t>(base + 12);
  const auto n_layers = read_le<std::uint64_t>(base + 20);
  const auto dim = read_le<std::uint64_t>(base + 28);
  const auto stored_crc = read_le<std::uint32_t>(base + 36);

  if (version != kFormatVersion)
    throw format_error("'" + path.string() + "': version mismatch (file " +
                       std::to_string(version) + ", reader " +
                       std::to_string(kFormatVersion) + ")");

  // Guard the size arithmetic against absurd header values.
  const long double expected_ld =
      static_cast<long double>(kHeaderSize) + 4.0L * n_tokens +
      4.0L * static_cast<long double>(n_tokens) * n_layers * dim;
  if (expected_ld > static_cast<long double>(size))
    throw format_error("'" + path.string() + "': truncated payload");
  const std::size_t n_values = n_tokens * n_layers * dim;
  const std::size_t expected = kHeaderSize + 4 * n_tokens + 4 * n_values;
  if (size != expected)
    throw format_error("'" + path.string() + "': payload size " + std::to_string(size) +
                       " does not match header (expected " + std::to_string(expected) + ")");

  if (crc32_of(base + kHeaderSize, size - kHeaderSize) != stored_crc)
    throw format_error("'" + path.string() + "': checksum mismatch");

  auto manifest = std::make_shared<StoreManifest>(
      StoreManifest::from_json(read_json_file(manifest_path_for(path))));
  manifest->validate();
  if (manifest->n_tokens != n_tokens || manifest->n_layers != n_layers ||
      manifest->dim != dim)
    throw format_error("'" + path.string() + "': manifest dimensions disagree with header");

  EmbeddingDataset ds;
  ds.path_ = path;
  ds.checksum_ = stored_crc;
  ds.labels_ = {reinterpret_cast<const std::uint32_t*>(base + kHeaderSize), n_tokens};
  ds.embeddings_ = {reinterpret_cast<const float*>(base + kHeaderSize + 4 * n_tokens),
                    n_values};
  for (std::uint32_t y : ds.labels_)
    if (y >= manifest->n_classes) throw format_error("label out of range");
  for (float v : ds.embeddings_)
    if (!std::isfinite(v)) throw format_error("non-finite embedding");

  ds.file_ = std::move(file);
  ds.manifest_ = std::move(manifest);
  return ds;
}

std::uint32_t EmbeddingDataset::label(std::uint64_t token) const {
  if (token >= n_tokens()) throw invalid_argument("token index out of range");
  return labels_[token];
}

std::span<const float> EmbeddingDataset::vector(std::uint64_t token,
                                                std::uint64_t layer) const {
  if (token >= n_tokens() || layer >= n_layers())
    throw invalid_argument("token/layer index out of range");
  return embeddings_.subspan((token * n_layers() + layer) * dim(), dim());
}

std::span<const float> EmbeddingDataset::token(std::uint64_t token) const {
  if (token >= n_tokens()) throw invalid_argument("token index out of range");
  const std::size_t width = n_layers() * dim();
  return embeddings_.subspan(token * width, width);
}

DatasetView::DatasetView(EmbeddingDataset dataset, std::vector<std::uint64_t> indices)
    : dataset_(std::move(dataset)), indices_(std::move(indices)) {
  for (auto i : indices_)
    if (i >= dataset_.n_tokens()) throw invalid_argument("view index out of range");
}

std::vector<std::uint32_t> DatasetView::labels() const {
  std::vector<std::uint32_t> out;
  out.reserve(indices_.size());
  for (auto i : indices_) out.push_back(dataset_.label(i));
  return out;
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

fs::path write_dataset(const StoreManifest& manifest, std::span<const float> embeddings,
                       std::span<const std::uint32_t> labels, const fs::path& path) {
  manifest.validate();
  if (labels.size() != manifest.n_tokens)
    throw invalid_argument("shape mismatch: " + std::to_string(labels.size()) +
                           " labels for " + std::to_string(manifest.n_tokens) + " tokens");
  const std::size_t n_values = manifest.n_tokens * manifest.n_layers * manifest.dim;
  if (embeddings.size() != n_values)
    throw invalid_argument("shape mismatch: " + std::to_string(embeddings.size()) +
                           " embedding values, expected " + std::to_string(n_values));
  for (std::uint32_t y : labels)
    if (y >= manifest.n_classes) throw invalid_argument("label out of range");
  for (float v : embeddings)
    if (!std::isfinite(v)) throw invalid_argument("non-finite embedding");

  std::uint32_t crc = crc32_of(labels.data(), labels.size_bytes());
  crc = crc32_of(embeddings.data(), embeddings.size_bytes(), crc);

  std::string header;
  header.append(kMagic, 4);
  append_le<std::uint64_t>(header, kFormatVersion);
  append_le<std::uint64_t>(header, manifest.n_tokens);
  append_le<std::uint64_t>(header, manifest.n_layers);
  append_le<std::uint64_t>(header, manifest.dim);
  append_le<std::uint32_t>(header, crc);

  // Write to temporaries and rename so existing readers never see partial files.
  const fs::path json_path = manifest_path_for(path);
  const fs::path tmp_bin = fs::path(path) += ".tmp";
  const fs::path tmp_json = fs::path(json_path) += ".tmp";
  {
    std::ofstream out(tmp_bin, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write '" + path.string() + "'");
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(labels.size_bytes()));
    out.write(reinterpret_cast<const char*>(embeddings.data()),
              static_cast<std::streamsize>(embeddings.size_bytes()));
    if (!out) throw io_error("short write to '" + path.string() + "'");
  }
  {
    std::ofstream out(tmp_json, std::ios::trunc);
    if (!out) throw io_error("cannot write '" + json_path.string() + "'");
    out << manifest.to_json().dump(2) << '\n';
    if (!out) throw io_error("short write to '" + json_path.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp_json, json_path, ec);
  if (!ec) fs::rename(tmp_bin, path, ec);
  if (ec) throw io_error("cannot finalize '" + path.string() + "': " + ec.message());
  return path;
}

DatasetView split_view(const EmbeddingDataset& dataset, const std::string& split) {
  const Split* s = dataset.manifest().find_split(split);
  if (!s) throw invalid_argument("unknown split '" + split + "'");
  std::vector<std::uint64_t> idx;
  for (const auto& r : s->ranges)
    for (std::uint64_t i = r.begin; i < r.end; ++i) idx.push_back(i);
  return DatasetView(dataset, std::move(idx));
}

DatasetView full_view(const EmbeddingDataset& dataset) {
  std::vector<std::uint64_t> idx(dataset.n_tokens());
  for (std::uint64_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return DatasetView(dataset, std::move(idx));
}

}  // namespace ssch::store
