#include "siblurry/datasets.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <unordered_set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "siblurry/error.hpp"
#include "siblurry/rng.hpp"

namespace fs = std::filesystem;

namespace siblurry {

namespace {

class MatrixSource final : public SampleSource {
 public:
  explicit MatrixSource(Matrix rows) : rows_(std::move(rows)) {}
  Vector fetch(SampleId id) const override {
    if (id >= static_cast<SampleId>(rows_.rows())) throw ContractError(fmt::format("unknown sample id {}", id));
    return rows_.row(static_cast<Index>(id)).transpose();
  }

 private:
  Matrix rows_;
};

/// Interleaved-by-record byte images (CIFAR binary layout: [C, H, W] per record).
class ByteImageSource final : public SampleSource {
 public:
  ByteImageSource(std::vector<std::uint8_t> pixels, Index record_size)
      : pixels_(std::move(pixels)), record_size_(record_size) {}
  Vector fetch(SampleId id) const override {
    const auto offset = static_cast<std::size_t>(id) * static_cast<std::size_t>(record_size_);
    if (offset + static_cast<std::size_t>(record_size_) > pixels_.size()) {
      throw ContractError(fmt::format("unknown sample id {}", id));
    }
    Vector v(record_size_);
    for (Index i = 0; i < record_size_; ++i) v[i] = pixels_[offset + static_cast<std::size_t>(i)] / 255.0;
    return v;
  }

 private:
  std::vector<std::uint8_t> pixels_;
  Index record_size_;
};

/// Decodes image files on demand and resizes them to a canonical resolution.
class ImageFileSource final : public SampleSource {
 public:
  ImageFileSource(std::vector<fs::path> paths, int size) : paths_(std::move(paths)), size_(size) {}
  Vector fetch(SampleId id) const override {
    if (id >= paths_.size()) throw ContractError(fmt::format("unknown sample id {}", id));
    cv::Mat img = cv::imread(paths_[id].string(), cv::IMREAD_COLOR);
    if (img.empty()) throw IngestionError("cannot decode image " + paths_[id].string());
    cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
    if (img.rows != size_ || img.cols != size_) cv::resize(img, img, cv::Size(size_, size_), 0, 0, cv::INTER_LINEAR);
    Vector v(3 * size_ * size_);
    for (int y = 0; y < size_; ++y) {
      const auto* row = img.ptr<cv::Vec3b>(y);
      for (int x = 0; x < size_; ++x) {
        for (int c = 0; c < 3; ++c) v[(c * size_ + y) * size_ + x] = row[x][c] / 255.0;
      }
    }
    return v;
  }

 private:
  std::vector<fs::path> paths_;
  int size_;
};

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw IngestionError(fmt::format("missing {}: {}", what, p.string()));
}

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".jpeg" || ext == ".jpg" || ext == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void check_class_count(const DatasetIndex& idx, int expected) {
  if (idx.num_classes != expected) {
    throw CorruptionError(fmt::format("{}: found {} classes, expected {}", idx.name, idx.num_classes, expected));
  }
  for (int c = 0; c < expected; ++c) {
    if (idx.train[static_cast<std::size_t>(c)].empty() || idx.test[static_cast<std::size_t>(c)].empty()) {
      throw CorruptionError(fmt::format("{}: class {} is empty in a split", idx.name, c));
    }
  }
}

DatasetIndex load_cifar100(const fs::path& root) {
  fs::path dir = root / "cifar-100-binary";
  if (!fs::exists(dir) && fs::exists(root / "train.bin")) dir = root;
  require_exists(root, "dataset root");
  require_exists(dir / "train.bin", "CIFAR-100 training file");
  require_exists(dir / "test.bin", "CIFAR-100 test file");

  constexpr std::size_t kPixels = 3 * 32 * 32;
  constexpr std::size_t kRecord = 2 + kPixels;
  DatasetIndex idx;
  idx.name = "cifar100";
  idx.num_classes = 100;
  idx.shape = {3, 32, 32};
  idx.train.assign(100, {});
  idx.test.assign(100, {});
  std::vector<std::uint8_t> pixels;
  SampleId next = 0;
  for (const auto& [file, split] : {std::pair{"train.bin", &idx.train}, std::pair{"test.bin", &idx.test}}) {
    std::ifstream in(dir / file, std::ios::binary);
    const auto size = fs::file_size(dir / file);
    if (size % kRecord != 0) throw CorruptionError(fmt::format("{} is not a whole number of records", file));
    std::vector<std::uint8_t> buf(size);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
    for (std::size_t r = 0; r < size / kRecord; ++r) {
      const std::uint8_t fine = buf[r * kRecord + 1];
      if (fine >= 100) throw CorruptionError(fmt::format("{}: label {} out of range", file, fine));
      (*split)[fine].push_back(next++);
      idx.labels.push_back(fine);
      pixels.insert(pixels.end(), buf.begin() + static_cast<std::ptrdiff_t>(r * kRecord + 2),
                    buf.begin() + static_cast<std::ptrdiff_t>((r + 1) * kRecord));
    }
  }
  idx.source = std::make_shared<ByteImageSource>(std::move(pixels), static_cast<Index>(kPixels));
  check_class_count(idx, 100);
  return idx;
}

DatasetIndex load_tiny_imagenet(const fs::path& root) {
  require_exists(root, "dataset root");
  fs::path dir = root / "tiny-imagenet-200";
  if (!fs::exists(dir) && fs::exists(root / "wnids.txt")) dir = root;
  require_exists(dir / "wnids.txt", "Tiny-ImageNet class list");
  require_exists(dir / "train", "Tiny-ImageNet train directory");
  require_exists(dir / "val" / "val_annotations.txt", "Tiny-ImageNet validation annotations");

  std::vector<std::string> wnids;
  {
    std::ifstream in(dir / "wnids.txt");
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) wnids.push_back(line);
    }
  }
  std::sort(wnids.begin(), wnids.end());
  std::map<std::string, ClassId> class_of;
  for (std::size_t i = 0; i < wnids.size(); ++i) class_of[wnids[i]] = static_cast<ClassId>(i);

  DatasetIndex idx;
  idx.name = "tiny_imagenet";
  idx.num_classes = static_cast<int>(wnids.size());
  idx.shape = {3, 64, 64};
  idx.train.assign(wnids.size(), {});
  idx.test.assign(wnids.size(), {});
  std::vector<fs::path> paths;
  for (const auto& w : wnids) {
    const fs::path images = dir / "train" / w / "images";
    require_exists(images, "Tiny-ImageNet class directory");
    for (auto& p : list_images(images)) {
      idx.train[static_cast<std::size_t>(class_of[w])].push_back(paths.size());
      idx.labels.push_back(class_of[w]);
      paths.push_back(std::move(p));
    }
  }
  std::ifstream ann(dir / "val" / "val_annotations.txt");
  std::vector<std::pair<std::string, std::string>> val;
  for (std::string line; std::getline(ann, line);) {
    const auto tab1 = line.find('\t');
    if (tab1 == std::string::npos) continue;
    const auto tab2 = line.find('\t', tab1 + 1);
    val.emplace_back(line.substr(0, tab1), line.substr(tab1 + 1, tab2 - tab1 - 1));
  }
  std::sort(val.begin(), val.end());
  for (const auto& [file, wnid] : val) {
    auto it = class_of.find(wnid);
    if (it == class_of.end()) throw CorruptionError("validation annotation names unknown class " + wnid);
    const fs::path p = dir / "val" / "images" / file;
    require_exists(p, "Tiny-ImageNet validation image");
    idx.test[static_cast<std::size_t>(it->second)].push_back(paths.size());
    idx.labels.push_back(it->second);
    paths.push_back(p);
  }
  idx.source = std::make_shared<ImageFileSource>(std::move(paths), 64);
  check_class_count(idx, 200);
  return idx;
}

DatasetIndex load_imagenet_r(const fs::path& root) {
  require_exists(root, "dataset root");
  fs::path dir = root / "imagenet-r";
  if (!fs::exists(dir)) dir = root;
  std::vector<std::string> wnids;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) wnids.push_back(e.path().filename().string());
  }
  if (wnids.empty()) throw IngestionError("missing ImageNet-R class directories under " + dir.string());
  std::sort(wnids.begin(), wnids.end());

  // No official split exists; a fixed 80/20 per-class split is used.
  DatasetIndex idx;
  idx.name = "imagenet_r";
  idx.num_classes = static_cast<int>(wnids.size());
  idx.shape = {3, 224, 224};
  idx.train.assign(wnids.size(), {});
  idx.test.assign(wnids.size(), {});
  std::vector<fs::path> paths;
  std::vector<std::pair<std::vector<fs::path>, std::vector<fs::path>>> per_class;
  const Rng split_rng(0x1a6e7e7);
  for (std::size_t c = 0; c < wnids.size(); ++c) {
    auto files = list_images(dir / wnids[c]);
    Rng r = split_rng.split(static_cast<std::uint64_t>(c));
    r.shuffle(files.begin(), files.end());
    const std::size_t n_train = round_half_up(0.8 * static_cast<double>(files.size()));
    per_class.emplace_back(std::vector<fs::path>(files.begin(), files.begin() + static_cast<std::ptrdiff_t>(n_train)),
                           std::vector<fs::path>(files.begin() + static_cast<std::ptrdiff_t>(n_train), files.end()));
  }
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    for (auto& p : per_class[c].first) {
      idx.train[c].push_back(paths.size());
      idx.labels.push_back(static_cast<ClassId>(c));
      paths.push_back(p);
    }
  }
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    for (auto& p : per_class[c].second) {
      idx.test[c].push_back(paths.size());
      idx.labels.push_back(static_cast<ClassId>(c));
      paths.push_back(p);
    }
  }
  idx.source = std::make_shared<ImageFileSource>(std::move(paths), 224);
  check_class_count(idx, 200);
  return idx;
}

}  // namespace

DatasetName parse_dataset_name(std::string_view name) {
  if (name == "cifar100") return DatasetName::cifar100;
  if (name == "tiny_imagenet") return DatasetName::tiny_imagenet;
  if (name == "imagenet_r") return DatasetName::imagenet_r;
  throw ConfigError(fmt::format("unknown dataset '{}'", name));
}

std::string to_string(DatasetName name) {
  switch (name) {
    case DatasetName::cifar100: return "cifar100";
    case DatasetName::tiny_imagenet: return "tiny_imagenet";
    case DatasetName::imagenet_r: return "imagenet_r";
  }
  return "?";
}

std::string dataset_layout(DatasetName name) {
  switch (name) {
    case DatasetName::cifar100:
      return "<root>/cifar-100-binary/{train.bin,test.bin} (CIFAR-100 binary version)";
    case DatasetName::tiny_imagenet:
      return "<root>/tiny-imagenet-200/{wnids.txt, train/<wnid>/images/*.JPEG, val/val_annotations.txt, "
             "val/images/*.JPEG}";
    case DatasetName::imagenet_r:
      return "<root>/imagenet-r/<wnid>/*.jpg (200 class directories; fixed 80/20 split)";
  }
  return {};
}

Sample DatasetIndex::fetch(SampleId id) const { return {source->fetch(id), label_of(id)}; }

Matrix DatasetIndex::fetch_rows(std::span<const SampleId> ids) const {
  Matrix out(static_cast<Index>(ids.size()), shape.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Index>(i)) = source->fetch(ids[i]).transpose();
  return out;
}

ClassId DatasetIndex::label_of(SampleId id) const {
  if (id >= labels.size()) throw ContractError(fmt::format("unknown sample id {}", id));
  return labels[id];
}

std::size_t DatasetIndex::train_size() const {
  std::size_t n = 0;
  for (const auto& c : train) n += c.size();
  return n;
}

std::size_t DatasetIndex::test_size() const {
  std::size_t n = 0;
  for (const auto& c : test) n += c.size();
  return n;
}

std::vector<SampleId> DatasetIndex::test_ids() const {
  std::vector<SampleId> ids;
  for (const auto& c : test) ids.insert(ids.end(), c.begin(), c.end());
  std::sort(ids.begin(), ids.end());
  return ids;
}

void DatasetIndex::validate() const {
  if (num_classes < 1 || train.size() != static_cast<std::size_t>(num_classes) ||
      test.size() != static_cast<std::size_t>(num_classes)) {
    throw CorruptionError(name + ": split class count does not match num_classes");
  }
  if (!source) throw CorruptionError(name + ": no sample source");
  std::unordered_set<SampleId> seen;
  for (const ClassSamples* split : {&train, &test}) {
    for (std::size_t c = 0; c < split->size(); ++c) {
      if ((*split)[c].empty()) throw CorruptionError(fmt::format("{}: class {} empty in a split", name, c));
      for (SampleId id : (*split)[c]) {
        if (!seen.insert(id).second) throw CorruptionError(fmt::format("{}: duplicate sample id {}", name, id));
        if (label_of(id) != static_cast<ClassId>(c)) {
          throw CorruptionError(fmt::format("{}: sample {} listed under the wrong class", name, id));
        }
      }
    }
  }
}

DatasetIndex make_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("make_synthetic: num_classes must be >= 2");
  if (spec.dim < 1 || spec.per_class < 1) throw ConfigError("make_synthetic: dim and per_class must be >= 1");
  if (spec.noise < 0.0) throw ConfigError("make_synthetic: noise must be nonnegative");
  const int test_per_class = spec.test_per_class > 0 ? spec.test_per_class : std::max(1, spec.per_class / 4);

  const Rng root(spec.seed);
  Rng center_rng = root.split("centers");
  Matrix centers(spec.num_classes, spec.dim);
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int d = 0; d < spec.dim; ++d) centers(c, d) = center_rng.normal();
    centers.row(c).normalize();
  }

  DatasetIndex idx;
  idx.name = "synthetic";
  idx.num_classes = spec.num_classes;
  idx.shape = {1, 1, spec.dim};
  idx.train.assign(static_cast<std::size_t>(spec.num_classes), {});
  idx.test.assign(static_cast<std::size_t>(spec.num_classes), {});
  const auto n = static_cast<Index>(spec.num_classes) * (spec.per_class + test_per_class);
  Matrix rows(n, spec.dim);
  const Rng noise_root = root.split("samples");
  SampleId next = 0;
  auto emit = [&](ClassSamples& split, int c) {
    Rng r = noise_root.split(next);
    for (int d = 0; d < spec.dim; ++d) rows(static_cast<Index>(next), d) = centers(c, d) + spec.noise * r.normal();
    split[static_cast<std::size_t>(c)].push_back(next);
    idx.labels.push_back(c);
    ++next;
  };
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int k = 0; k < spec.per_class; ++k) emit(idx.train, c);
  }
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int k = 0; k < test_per_class; ++k) emit(idx.test, c);
  }
  idx.source = std::make_shared<MatrixSource>(std::move(rows));
  return idx;
}

DatasetIndex make_synthetic(int num_classes, int dim, int per_class, double noise, std::uint64_t seed) {
  return make_synthetic(SyntheticSpec{num_classes, dim, per_class, 0, noise, seed});
}

DatasetIndex load_dataset(DatasetName name, const fs::path& root) {
  switch (name) {
    case DatasetName::cifar100: return load_cifar100(root);
    case DatasetName::tiny_imagenet: return load_tiny_imagenet(root);
    case DatasetName::imagenet_r: return load_imagenet_r(root);
  }
  throw ConfigError("unknown dataset");
}

void save_index(const DatasetIndex& index, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::ordered_json j;
  j["name"] = index.name;
  j["num_classes"] = index.num_classes;
  j["shape"] = {index.shape.channels, index.shape.height, index.shape.width};
  j["num_samples"] = index.labels.size();
  j["train"] = index.train;
  j["test"] = index.test;
  std::ofstream meta(dir / "index.json");
  if (!meta) throw IoError("cannot write " + (dir / "index.json").string());
  meta << j.dump() << '\n';

  std::ofstream data(dir / "samples.bin", std::ios::binary | std::ios::trunc);
  if (!data) throw IoError("cannot write " + (dir / "samples.bin").string());
  for (SampleId id = 0; id < index.labels.size(); ++id) {
    const Vector v = index.source->fetch(id);
    data.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
  }
  if (!data) throw IoError("failed writing samples.bin");
}

DatasetIndex load_index(const fs::path& dir) {
  require_exists(dir / "index.json", "index metadata");
  require_exists(dir / "samples.bin", "index samples");
  nlohmann::json j;
  try {
    std::ifstream in(dir / "index.json");
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("index.json: ") + e.what());
  }
  DatasetIndex idx;
  idx.name = j.at("name").get<std::string>();
  idx.num_classes = j.at("num_classes").get<int>();
  const auto shape = j.at("shape").get<std::vector<int>>();
  idx.shape = {shape.at(0), shape.at(1), shape.at(2)};
  idx.train = j.at("train").get<ClassSamples>();
  idx.test = j.at("test").get<ClassSamples>();
  const auto n = j.at("num_samples").get<std::size_t>();
  idx.labels.assign(n, -1);
  for (const ClassSamples* split : {&idx.train, &idx.test}) {
    for (std::size_t c = 0; c < split->size(); ++c) {
      for (SampleId id : (*split)[c]) {
        if (id >= n) throw CorruptionError(fmt::format("index lists sample {} beyond num_samples", id));
        idx.labels[id] = static_cast<ClassId>(c);
      }
    }
  }
  const auto bytes = fs::file_size(dir / "samples.bin");
  if (bytes != n * static_cast<std::size_t>(idx.shape.size()) * 8) {
    throw CorruptionError("samples.bin size does not match index.json");
  }
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMajor rows(static_cast<Index>(n), idx.shape.size());
  std::ifstream data(dir / "samples.bin", std::ios::binary);
  data.read(reinterpret_cast<char*>(rows.data()), static_cast<std::streamsize>(bytes));
  idx.source = std::make_shared<MatrixSource>(Matrix(rows));
  idx.validate();
  return idx;
}

}  // namespace siblurry
