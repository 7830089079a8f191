#pragma once

#include <filesystem>
#include <string>

#include "sdlab/common.hpp"
#include "sdlab/numerics.hpp"
#include "sdlab/prompts.hpp"
#include "sdlab/scenes.hpp"
#include "sdlab/teacher.hpp"

// vendored single-header nlohmann/json
#include "json.hpp"

namespace sdlab::io {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ----------------------------- generic files ------------------------------

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& content);
void write_text_atomic(const fs::path& path, const std::string& content);
json read_json(const fs::path& path);
void write_json(const fs::path& path, const json& j);

// FNV-1a 64 over the file bytes, as 16 hex digits.
std::string file_hash_hex(const fs::path& path);
std::string string_hash_hex(const std::string& bytes);

// ----------------------------- domain objects -----------------------------

json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const json& j);

json teacher_to_json(const GmTeacher& t);
GmTeacher teacher_from_json(const json& j);
GmTeacher load_teacher(const fs::path& path);
void save_teacher(const fs::path& path, const GmTeacher& t);
std::string teacher_hash(const GmTeacher& t);

void save_prompt(const fs::path& path, const Matrix& base);
Matrix load_prompt(const fs::path& path);

struct TokenFile {
  int particle = 0;
  Matrix tokens;
  double initial_crn_loss = 0.0;
  double final_crn_loss = 0.0;
  int reference_label = -1;
  std::uint64_t seed = 0;
};
void save_tokens(const fs::path& path, const TokenFile& t);
TokenFile load_tokens(const fs::path& path);
fs::path token_filename(int particle);  // tokens_particle_<i>.json

// --------------------------- binary checkpoints ---------------------------
// Flat little-endian f64 payload plus a JSON sidecar describing it.

void write_f64_le(const fs::path& path, std::span<const double> values);
Vec read_f64_le(const fs::path& path);

void save_scene(const fs::path& base_path_no_ext, const Scene& scene);
std::unique_ptr<Scene> load_scene(const fs::path& base_path_no_ext);

void save_adam(const fs::path& base_path_no_ext, const AdamState& st);
AdamState load_adam(const fs::path& base_path_no_ext);

// ------------------------------- images -----------------------------------

// P6 8-bit PPM. Pixels are row-major, channel-interleaved doubles in [0,1];
// 1-channel data is expanded to gray RGB.
void write_ppm(const fs::path& path, const Vec& pixels, int width, int height, int channels);
struct PpmImage {
  int width = 0, height = 0;
  Vec pixels;  // RGB in [0,1]
};
PpmImage read_ppm(const fs::path& path);

// Grid assembly: rows x cols tiles, each tile an image of identical size.
Vec contact_sheet(const std::vector<Vec>& tiles, int rows, int cols, int tile_w, int tile_h,
                  int channels, int& out_w, int& out_h);

// ------------------------------- metrics ----------------------------------

struct MetricsRow {
  long iter = 0;
  std::string method;
  double iq = 0.0, iv = 0.0, cosine_sim = 0.0;
  int views = 0;
  std::string extractor_id;
  std::uint64_t seed = 0;
};
void append_metrics_csv(const fs::path& path, const MetricsRow& row);

// Exclusive-create lock file; removed on destruction.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

std::string utc_timestamp();

}  // namespace sdlab::io
