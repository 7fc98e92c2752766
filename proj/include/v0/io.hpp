#pragma once

// Line-delimited JSON readers/writers and the V0EM binary embedding format.
//
// V0EM layout (all integers little-endian):
//   "V0EM" | u32 version (=1) | u32 dim | u64 count |
//   count x { u16 id_len | id bytes | dim x f32 }

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "v0/core.hpp"

namespace v0 {

using json = nlohmann::json;

inline constexpr std::array<char, 4> kV0emMagic = {'V', '0', 'E', 'M'};
inline constexpr std::uint32_t kV0emVersion = 1;
inline constexpr std::size_t kV0emHeaderBytes = 4 + 4 + 4 + 8;

// Output files written by the CLI may start with a provenance object carrying
// this key; readers skip it.
inline constexpr const char* kHeaderKey = "v0_header";

namespace detail {

inline std::ifstream open_in(const std::string& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw IoError("cannot open \"" + path + "\" for reading");
  return in;
}

inline std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw IoError("cannot open \"" + path + "\" for writing");
  return out;
}

// Calls fn(object, line_number) for each non-blank, non-header line.
inline void for_each_json_line(const std::string& path,
                               const std::function<void(const json&, std::size_t)>& fn) {
  auto in = open_in(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": malformed line: " + e.what());
    }
    if (!obj.is_object()) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": expected an object");
    }
    if (obj.contains(kHeaderKey)) continue;
    try {
      fn(obj, lineno);
    } catch (const json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (in.bad()) throw IoError("read failure on \"" + path + "\"");
}

template <typename T>
T require(const json& obj, const char* field) {
  if (!obj.contains(field)) throw ValidationError(std::string("missing field \"") + field + "\"");
  return obj.at(field).get<T>();
}

template <typename T>
void put_le(std::string& buf, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  buf.append(bytes.data(), bytes.size());
}

template <typename T>
T get_le(const std::string& buf, std::size_t& pos) {
  if (buf.size() - pos < sizeof(T) || pos > buf.size()) {
    throw ValidationError("V0EM: truncated payload at byte " + std::to_string(pos));
  }
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), buf.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  pos += sizeof(T);
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace detail

inline QuerySet load_prompts(const std::string& path) {
  QuerySet set;
  detail::for_each_json_line(path, [&](const json& obj, std::size_t) {
    Query q;
    q.id = detail::require<std::string>(obj, "id");
    q.text = detail::require<std::string>(obj, "text");
    if (obj.contains("meta")) {
      if (!obj["meta"].is_object()) throw ValidationError("field \"meta\" must be an object");
      q.meta_json = obj["meta"].dump();
    }
    set.add(std::move(q));
  });
  return set;
}

inline void save_prompts(const QuerySet& set, const std::string& path,
                         const json* header = nullptr) {
  auto out = detail::open_out(path);
  if (header) out << header->dump() << '\n';
  for (const Query& q : set.queries()) {
    json obj{{"id", q.id}, {"text", q.text}};
    if (!q.meta_json.empty()) obj["meta"] = json::parse(q.meta_json);
    out << obj.dump() << '\n';
  }
  if (!out) throw IoError("write failure on \"" + path + "\"");
}

inline RolloutLog load_rollouts(const std::string& path) {
  RolloutLog log;
  detail::for_each_json_line(path, [&](const json& obj, std::size_t) {
    auto step = detail::require<long long>(obj, "step");
    if (step < 0) throw ValidationError("step must be non-negative");
    log.add(RolloutRecord::make(detail::require<std::string>(obj, "policy_id"),
                                static_cast<std::uint64_t>(step),
                                detail::require<std::string>(obj, "query_id"),
                                detail::require<long long>(obj, "successes"),
                                detail::require<long long>(obj, "trials")));
  });
  return log;
}

inline void save_rollouts(const RolloutLog& log, const std::string& path,
                          const json* header = nullptr) {
  auto out = detail::open_out(path);
  if (header) out << header->dump() << '\n';
  for (const RolloutRecord& r : log.records()) {
    out << json{{"policy_id", r.policy_id}, {"step", r.step},         {"query_id", r.query_id},
                {"successes", r.successes}, {"trials", r.trials}}
               .dump()
        << '\n';
  }
  if (!out) throw IoError("write failure on \"" + path + "\"");
}

inline std::string encode_embeddings(const EmbeddingStore& store) {
  std::string buf;
  buf.reserve(kV0emHeaderBytes + store.size() * (2 + 16 + 4 * store.dim()));
  buf.append(kV0emMagic.data(), kV0emMagic.size());
  detail::put_le<std::uint32_t>(buf, kV0emVersion);
  detail::put_le<std::uint32_t>(buf, store.dim());
  detail::put_le<std::uint64_t>(buf, store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string& id = store.ids()[i];
    if (id.size() > 0xFFFF) throw ValidationError("V0EM: id longer than 65535 bytes");
    detail::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(id.size()));
    buf.append(id);
    for (float v : store.row(i)) detail::put_le<float>(buf, v);
  }
  return buf;
}

inline EmbeddingStore decode_embeddings(const std::string& buf) {
  if (buf.size() < 4 || !std::equal(kV0emMagic.begin(), kV0emMagic.end(), buf.begin())) {
    throw ValidationError("V0EM: bad magic");
  }
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(buf, pos);
  if (version != kV0emVersion) {
    throw ValidationError("V0EM: unsupported version " + std::to_string(version));
  }
  const auto dim = detail::get_le<std::uint32_t>(buf, pos);
  const auto count = detail::get_le<std::uint64_t>(buf, pos);
  if (dim == 0) throw ValidationError("V0EM: dim must be positive");
  EmbeddingStore store(dim);
  std::vector<float> row(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint16_t>(buf, pos);
    if (buf.size() - pos < len) throw ValidationError("V0EM: truncated payload in record " + std::to_string(i));
    std::string id = buf.substr(pos, len);
    pos += len;
    if (buf.size() - pos < static_cast<std::size_t>(dim) * 4) {
      throw ValidationError("V0EM: truncated payload in record " + std::to_string(i));
    }
    for (auto& v : row) v = detail::get_le<float>(buf, pos);
    store.add(std::move(id), row);
  }
  if (pos != buf.size()) throw ValidationError("V0EM: trailing bytes after last record");
  return store;
}

inline EmbeddingStore read_embeddings(const std::string& path) {
  auto in = detail::open_in(path, std::ios::in | std::ios::binary);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on \"" + path + "\"");
  return decode_embeddings(buf);
}

inline void write_embeddings(const EmbeddingStore& store, const std::string& path) {
  auto out = detail::open_out(path, std::ios::out | std::ios::binary);
  const std::string buf = encode_embeddings(store);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failure on \"" + path + "\"");
}

}  // namespace v0
