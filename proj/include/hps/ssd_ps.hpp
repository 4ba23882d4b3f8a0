/*
 * Copyright (c) 2026, the hps authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <zlib.h>

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hps/common.hpp"
#include "hps/types.hpp"

namespace hps {

// Thrown by the test fault hook to emulate the process vanishing mid-write:
// no cleanup runs, the partial file stays on disk for recovery to handle.
class SimulatedCrash : public Error {
 public:
  using Error::Error;
};

namespace storefmt {

// On-disk parameter file pf_<id>.bin, little-endian:
//   header : magic "HPSF" | version u16 | record_count u16 |
//            embedding_width u16 | reserved u16                (12 bytes)
//   records: record_count x (key u64 | E x f32 emb | E x f32 opt_state)
//   footer : CRC32 of header+records, u32
inline constexpr char kMagic[4] = {'H', 'P', 'S', 'F'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 12;
inline constexpr std::size_t kFooterBytes = 4;

inline std::size_t record_bytes(std::size_t width) { return 8 + 8 * width; }

inline std::size_t file_bytes(std::size_t records, std::size_t width) {
  return kHeaderBytes + records * record_bytes(width) + kFooterBytes;
}

inline void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(v & 0xff);
  b.push_back((v >> 8) & 0xff);
}

inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xff);
}

inline void put_u64(std::vector<unsigned char>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back((v >> (8 * i)) & 0xff);
}

inline void put_f32(std::vector<unsigned char>& b, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(b, v);
}

inline std::uint16_t get_u16(const unsigned char* p) {
  return std::uint16_t(p[0]) | (std::uint16_t(p[1]) << 8);
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

inline float get_f32(const unsigned char* p) {
  const std::uint32_t v = get_u32(p);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace storefmt

struct StoreConfig {
  std::filesystem::path dir;
  std::size_t embedding_dim = 8;  // 0 = infer from existing files
  std::size_t file_capacity = 4096;
  double usage_threshold = 1.5;  // trigger: disk_bytes >= threshold*live_bytes
  bool fsync_writes = false;
  bool background_compaction = true;
};

// The disk tier: append-only fixed-capacity parameter files on a local
// filesystem, an in-memory key->file map with per-file stale counters,
// batched dumps as new files, and compaction of files that are more than
// half stale. One writer at a time; any number of concurrent readers.
class SsdStore {
 public:
  struct LoadResult {
    std::map<ParamKey, SparseParam> found;
    std::vector<ParamKey> missing;
  };

  struct Stats {
    std::uint64_t files = 0;
    std::uint64_t disk_bytes = 0;
    std::uint64_t live_records = 0;
    std::uint64_t stale_records = 0;
    std::uint64_t total_records = 0;
    std::uint64_t live_bytes = 0;
    std::uint64_t files_read = 0;
    std::uint64_t files_written = 0;
    std::uint64_t bytes_read = 0;
    std::uint64_t bytes_written = 0;
    std::uint64_t compactions = 0;
    std::uint64_t backward_seeks = 0;
    std::uint64_t recovered_invalid_files = 0;
  };

  struct FsckReport {
    bool ok = true;
    std::uint64_t files_scanned = 0;
    std::uint64_t records = 0;
    std::uint64_t live = 0;
    std::uint64_t stale = 0;
    std::vector<std::string> problems;
  };

  explicit SsdStore(StoreConfig cfg) : cfg_(std::move(cfg)) {
    namespace fs = std::filesystem;
    check(cfg_.file_capacity >= 1 && cfg_.file_capacity <= 0xffff,
          "store: file_capacity must be in [1, 65535]");
    fs::create_directories(cfg_.dir);
    recover();
    if (cfg_.background_compaction)
      compactor_ = std::thread([this] { compaction_loop(); });
  }

  ~SsdStore() {
    {
      std::lock_guard lk(bg_mu_);
      shutdown_ = true;
    }
    bg_cv_.notify_all();
    if (compactor_.joinable()) compactor_.join();
    std::lock_guard wk(writer_mu_);
    reap_deferred();
  }

  SsdStore(const SsdStore&) = delete;
  SsdStore& operator=(const SsdStore&) = delete;

  std::size_t embedding_dim() const { return cfg_.embedding_dim; }
  const std::filesystem::path& dir() const { return cfg_.dir; }

  // Requested keys grouped by file; each touched file is read once in full
  // and only requested keys are decoded. Unmapped keys come back as missing.
  LoadResult load(const std::vector<ParamKey>& keys) {
    LoadResult out;
    std::map<std::uint64_t, std::vector<ParamKey>> by_file;
    std::vector<std::shared_ptr<FileInfo>> pinned;
    {
      std::shared_lock lk(map_mu_);
      for (ParamKey k : keys) {
        auto it = map_.find(k);
        if (it == map_.end()) {
          out.missing.push_back(k);
        } else {
          if (by_file.emplace(it->second, std::vector<ParamKey>{}).second) {
            auto fi = files_.at(it->second);
            fi->readers.fetch_add(1);
            pinned.push_back(fi);
          }
          by_file[it->second].push_back(k);
        }
      }
    }
    for (auto& [id, wanted] : by_file) {
      std::unordered_set<ParamKey> want(wanted.begin(), wanted.end());
      const auto records = read_file(id);
      std::size_t matched = 0;
      for (const auto& [k, v] : records) {
        if (want.count(k)) {
          out.found.emplace(k, v);
          ++matched;
        }
      }
      if (matched != want.size())
        throw CorruptionError("store: file " + std::to_string(id) +
                              " is missing mapped keys");
    }
    for (auto& fi : pinned) fi->readers.fetch_sub(1);
    return out;
  }

  // Writes `params` as ceil(n/F) fresh files and remaps each key; the old
  // location's stale counter grows. Returns the new file ids.
  std::vector<std::uint64_t> dump(
      const std::map<ParamKey, SparseParam>& params) {
    check(!params.empty(), "store: dump of empty parameter set");
    std::vector<std::uint64_t> new_ids;
    {
      std::lock_guard wk(writer_mu_);
      reap_deferred();
      auto it = params.begin();
      while (it != params.end()) {
        std::vector<std::pair<ParamKey, const SparseParam*>> chunk;
        for (std::size_t i = 0; i < cfg_.file_capacity && it != params.end();
             ++i, ++it)
          chunk.emplace_back(it->first, &it->second);
        new_ids.push_back(write_chunk(chunk));
      }
    }
    request_compaction_check();
    return new_ids;
  }

  // One eligibility pass: merge every file that is strictly more than 50%
  // stale. Returns the number of files merged away.
  std::size_t compact_now() {
    std::lock_guard wk(writer_mu_);
    return compact_pass();
  }

  void wait_compaction_idle() {
    std::unique_lock lk(bg_mu_);
    bg_cv_.wait(lk, [&] { return !bg_requested_ && !bg_running_; });
    std::lock_guard wk(writer_mu_);
    reap_deferred();
  }

  Stats stats() const {
    Stats s;
    {
      std::shared_lock lk(map_mu_);
      for (const auto& [id, fi] : files_) {
        if (fi->deleted) continue;
        s.files++;
        s.disk_bytes += fi->bytes;
        s.total_records += fi->record_count;
        s.stale_records += fi->stale;
      }
      s.live_records = map_.size();
    }
    s.live_bytes = s.live_records * storefmt::record_bytes(cfg_.embedding_dim);
    s.files_read = files_read_.load();
    s.files_written = files_written_.load();
    s.bytes_read = bytes_read_.load();
    s.bytes_written = bytes_written_.load();
    s.compactions = compactions_.load();
    s.backward_seeks = backward_seeks_.load();
    s.recovered_invalid_files = recovered_invalid_;
    return s;
  }

  std::vector<ParamKey> all_keys() const {
    std::shared_lock lk(map_mu_);
    std::vector<ParamKey> out;
    out.reserve(map_.size());
    for (const auto& [k, id] : map_) out.push_back(k);
    return out;
  }

  // Full rescan: checksum every mapped file and recompute the stale
  // counters from the FileMap, comparing against the maintained ones.
  FsckReport fsck() {
    std::lock_guard wk(writer_mu_);
    FsckReport rep;
    std::shared_lock lk(map_mu_);
    std::unordered_map<std::uint64_t, std::uint64_t> live_by_file;
    for (const auto& [k, id] : map_) live_by_file[id]++;
    for (const auto& [id, fi] : files_) {
      if (fi->deleted) continue;
      rep.files_scanned++;
      rep.records += fi->record_count;
      try {
        const auto records = read_file(id);
        std::uint64_t live = 0;
        ParamKey prev = 0;
        bool first = true;
        for (const auto& [k, v] : records) {
          auto it = map_.find(k);
          if (it != map_.end() && it->second == id) live++;
          if (!first && k <= prev) {
            rep.ok = false;
            rep.problems.push_back("file " + std::to_string(id) +
                                   ": records not sorted by key");
          }
          prev = k;
          first = false;
        }
        if (records.size() != fi->record_count) {
          rep.ok = false;
          rep.problems.push_back("file " + std::to_string(id) +
                                 ": record count drift");
        }
        if (fi->record_count - fi->stale != live) {
          rep.ok = false;
          rep.problems.push_back("file " + std::to_string(id) +
                                 ": stale counter drift");
        }
        rep.live += live;
        rep.stale += records.size() - live;
      } catch (const Error& e) {
        rep.ok = false;
        rep.problems.push_back("file " + std::to_string(id) + ": " + e.what());
      }
    }
    if (rep.live != map_.size()) {
      rep.ok = false;
      rep.problems.push_back("live record total does not match FileMap size");
    }
    return rep;
  }

  // Test hook, called before every physical write.
  std::function<void()> write_fault_hook;

 private:
  struct FileInfo {
    std::uint64_t id = 0;
    std::uint32_t record_count = 0;
    std::uint32_t stale = 0;
    std::uint64_t bytes = 0;
    std::atomic<int> readers{0};
    bool deleted = false;
  };

  std::filesystem::path path_of(std::uint64_t id) const {
    return cfg_.dir / ("pf_" + std::to_string(id) + ".bin");
  }

  void recover() {
    namespace fs = std::filesystem;
    std::vector<std::uint64_t> ids;
    for (const auto& ent : fs::directory_iterator(cfg_.dir)) {
      const std::string name = ent.path().filename().string();
      if (name.rfind("pf_", 0) == 0 && name.size() > 7 &&
          name.substr(name.size() - 4) == ".bin")
        ids.push_back(std::stoull(name.substr(3, name.size() - 7)));
    }
    std::sort(ids.rbegin(), ids.rend());  // newest first: first mapping wins
    for (std::uint64_t id : ids) {
      next_id_ = std::max(next_id_, id + 1);
      std::vector<std::pair<ParamKey, SparseParam>> records;
      try {
        records = read_file_at(path_of(id), &cfg_.embedding_dim);
      } catch (const Error&) {
        fs::remove(path_of(id));  // crash debris
        recovered_invalid_++;
        continue;
      }
      auto fi = std::make_shared<FileInfo>();
      fi->id = id;
      fi->record_count = std::uint32_t(records.size());
      fi->bytes = storefmt::file_bytes(records.size(), cfg_.embedding_dim);
      files_.emplace(id, std::move(fi));
      for (const auto& [k, v] : records) map_.try_emplace(k, id);
    }
    // Stale counters from the rebuilt map.
    std::unordered_map<std::uint64_t, std::uint32_t> live_by_file;
    for (const auto& [k, id] : map_) live_by_file[id]++;
    for (auto& [id, fi] : files_)
      fi->stale = fi->record_count - live_by_file[id];
    check(cfg_.embedding_dim > 0,
          "store: embedding_dim unset and no files to infer it from");
  }

  // Monotone append-only writer; every write op passes the fault hook.
  struct SeqWriter {
    std::FILE* f = nullptr;
    std::size_t offset = 0;
    SsdStore* store = nullptr;

    void write(const unsigned char* p, std::size_t n) {
      if (store->write_fault_hook) store->write_fault_hook();
      if (std::ftell(f) < long(offset))
        store->backward_seeks_.fetch_add(1);  // must stay 0: append-only
      if (std::fwrite(p, 1, n, f) != n)
        throw Error("store: short write (disk full?)");
      offset += n;
    }
  };

  std::uint64_t write_chunk(
      const std::vector<std::pair<ParamKey, const SparseParam*>>& chunk) {
    const std::size_t width = cfg_.embedding_dim;
    const std::uint64_t id = next_id_++;
    const auto path = path_of(id);
    std::FILE* f = std::fopen(path.string().c_str(), "wb");
    check(f != nullptr, "store: cannot create " + path.string());
    bool crashed = false;
    try {
      SeqWriter w{f, 0, this};
      std::vector<unsigned char> header;
      header.insert(header.end(), storefmt::kMagic, storefmt::kMagic + 4);
      storefmt::put_u16(header, storefmt::kVersion);
      storefmt::put_u16(header, std::uint16_t(chunk.size()));
      storefmt::put_u16(header, std::uint16_t(width));
      storefmt::put_u16(header, 0);
      w.write(header.data(), header.size());
      uLong crc = crc32(0L, header.data(), uInt(header.size()));
      for (const auto& [k, p] : chunk) {
        check(p->embedding.size() == width && p->opt_state.size() == width,
              "store: parameter width mismatch");
        std::vector<unsigned char> rec;
        rec.reserve(storefmt::record_bytes(width));
        storefmt::put_u64(rec, k);
        for (float v : p->embedding) storefmt::put_f32(rec, v);
        for (float v : p->opt_state) storefmt::put_f32(rec, v);
        w.write(rec.data(), rec.size());
        crc = crc32(crc, rec.data(), uInt(rec.size()));
      }
      std::vector<unsigned char> footer;
      storefmt::put_u32(footer, std::uint32_t(crc));
      w.write(footer.data(), footer.size());
      if (cfg_.fsync_writes) std::fflush(f);
      std::fclose(f);
      f = nullptr;
    } catch (const SimulatedCrash&) {
      crashed = true;  // the "process" is gone: leave the partial file be
      if (f) std::fclose(f);
      throw;
    } catch (...) {
      if (f) std::fclose(f);
      std::filesystem::remove(path);  // partial-file cleanup
      throw;
    }
    (void)crashed;

    const std::uint64_t bytes = storefmt::file_bytes(chunk.size(), width);
    files_written_.fetch_add(1);
    bytes_written_.fetch_add(bytes);

    auto fi = std::make_shared<FileInfo>();
    fi->id = id;
    fi->record_count = std::uint32_t(chunk.size());
    fi->bytes = bytes;
    {
      std::unique_lock lk(map_mu_);
      files_.emplace(id, std::move(fi));
      for (const auto& [k, p] : chunk) {
        auto [it, fresh] = map_.try_emplace(k, id);
        if (!fresh) {
          files_.at(it->second)->stale++;
          it->second = id;
        }
      }
    }
    return id;
  }

  std::vector<std::pair<ParamKey, SparseParam>> read_file(
      std::uint64_t id) const {
    std::size_t width = cfg_.embedding_dim;
    auto records = read_file_at(path_of(id), &width);
    files_read_.fetch_add(1);
    bytes_read_.fetch_add(storefmt::file_bytes(records.size(), width));
    return records;
  }

  // Reads and fully validates one parameter file. *width_inout of 0 adopts
  // the file's width. Throws CorruptionError on any mismatch.
  static std::vector<std::pair<ParamKey, SparseParam>> read_file_at(
      const std::filesystem::path& path, std::size_t* width_inout) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good())
      throw CorruptionError("store: mapped file absent: " + path.string());
    std::vector<unsigned char> buf{std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>()};
    if (buf.size() < storefmt::kHeaderBytes + storefmt::kFooterBytes)
      throw CorruptionError("store: truncated file " + path.string());
    if (std::memcmp(buf.data(), storefmt::kMagic, 4) != 0)
      throw CorruptionError("store: bad magic in " + path.string());
    if (storefmt::get_u16(buf.data() + 4) != storefmt::kVersion)
      throw CorruptionError("store: bad version in " + path.string());
    const std::size_t count = storefmt::get_u16(buf.data() + 6);
    const std::size_t width = storefmt::get_u16(buf.data() + 8);
    if (*width_inout == 0) *width_inout = width;
    if (width != *width_inout)
      throw CorruptionError("store: embedding width mismatch in " +
                            path.string());
    if (buf.size() != storefmt::file_bytes(count, width))
      throw CorruptionError("store: size mismatch in " + path.string());
    const std::size_t payload = buf.size() - storefmt::kFooterBytes;
    const std::uint32_t want = storefmt::get_u32(buf.data() + payload);
    const std::uint32_t got =
        std::uint32_t(crc32(crc32(0L, Z_NULL, 0), buf.data(), uInt(payload)));
    if (want != got)
      throw CorruptionError("store: checksum mismatch in " + path.string());

    std::vector<std::pair<ParamKey, SparseParam>> out;
    out.reserve(count);
    const unsigned char* p = buf.data() + storefmt::kHeaderBytes;
    for (std::size_t i = 0; i < count; ++i) {
      const ParamKey k = storefmt::get_u64(p);
      p += 8;
      SparseParam sp(width);
      for (std::size_t j = 0; j < width; ++j, p += 4)
        sp.embedding[j] = storefmt::get_f32(p);
      for (std::size_t j = 0; j < width; ++j, p += 4)
        sp.opt_state[j] = storefmt::get_f32(p);
      out.emplace_back(k, std::move(sp));
    }
    return out;
  }

  // --- compaction ---

  void request_compaction_check() {
    if (!cfg_.background_compaction) {
      std::lock_guard wk(writer_mu_);
      if (over_threshold()) compact_pass();
      return;
    }
    {
      std::lock_guard lk(bg_mu_);
      bg_requested_ = true;
    }
    bg_cv_.notify_all();
  }

  void compaction_loop() {
    for (;;) {
      {
        std::unique_lock lk(bg_mu_);
        bg_cv_.wait(lk, [&] { return bg_requested_ || shutdown_; });
        if (shutdown_) return;
        bg_requested_ = false;
        bg_running_ = true;
      }
      {
        std::lock_guard wk(writer_mu_);
        if (over_threshold()) compact_pass();
      }
      {
        std::lock_guard lk(bg_mu_);
        bg_running_ = false;
      }
      bg_cv_.notify_all();
    }
  }

  bool over_threshold() const {
    const Stats s = stats();
    if (s.disk_bytes == 0) return false;
    return double(s.disk_bytes) >= cfg_.usage_threshold * double(s.live_bytes);
  }

  // Caller holds writer_mu_.
  std::size_t compact_pass() {
    reap_deferred();
    std::vector<std::uint64_t> candidates;
    {
      std::shared_lock lk(map_mu_);
      for (const auto& [id, fi] : files_)
        if (!fi->deleted && std::uint64_t(fi->stale) * 2 > fi->record_count)
          candidates.push_back(id);
    }
    if (candidates.empty()) return 0;

    // Gather surviving records from the eligible files.
    std::map<ParamKey, SparseParam> live;
    for (std::uint64_t id : candidates) {
      const auto records = read_file(id);
      std::shared_lock lk(map_mu_);
      for (const auto& [k, v] : records) {
        auto it = map_.find(k);
        if (it != map_.end() && it->second == id) live.emplace(k, v);
      }
    }
    // Merge into fresh files; remapping marks the candidates fully stale.
    {
      auto it = live.begin();
      while (it != live.end()) {
        std::vector<std::pair<ParamKey, const SparseParam*>> chunk;
        for (std::size_t i = 0; i < cfg_.file_capacity && it != live.end();
             ++i, ++it)
          chunk.emplace_back(it->first, &it->second);
        write_chunk(chunk);
      }
    }
    // Old files go away once no reader holds them.
    {
      std::unique_lock lk(map_mu_);
      for (std::uint64_t id : candidates) files_.at(id)->deleted = true;
    }
    reap_deferred();
    compactions_.fetch_add(1);
    return candidates.size();
  }

  // Caller holds writer_mu_.
  void reap_deferred() {
    std::unique_lock lk(map_mu_);
    for (auto it = files_.begin(); it != files_.end();) {
      if (it->second->deleted && it->second->readers.load() == 0) {
        std::filesystem::remove(path_of(it->first));
        it = files_.erase(it);
      } else {
        ++it;
      }
    }
  }

  StoreConfig cfg_;

  mutable std::shared_mutex map_mu_;
  std::unordered_map<ParamKey, std::uint64_t> map_;
  std::map<std::uint64_t, std::shared_ptr<FileInfo>> files_;
  std::uint64_t next_id_ = 0;

  std::mutex writer_mu_;

  std::thread compactor_;
  std::mutex bg_mu_;
  std::condition_variable bg_cv_;
  bool bg_requested_ = false;
  bool bg_running_ = false;
  bool shutdown_ = false;

  mutable std::atomic<std::uint64_t> files_read_{0};
  mutable std::atomic<std::uint64_t> files_written_{0};
  mutable std::atomic<std::uint64_t> bytes_read_{0};
  mutable std::atomic<std::uint64_t> bytes_written_{0};
  std::atomic<std::uint64_t> compactions_{0};
  std::atomic<std::uint64_t> backward_seeks_{0};
  std::uint64_t recovered_invalid_ = 0;
};

}  // namespace hps
