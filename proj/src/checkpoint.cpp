/* ctxmt - a desk-scale laboratory for context-aware neural machine translation.
 * Copyright (C) 2026 The ctxmt authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "ctxmt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ctxmt {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v & 0xFF));
  out.push_back(uint8_t((v >> 8) & 0xFF));
  out.push_back(uint8_t((v >> 16) & 0xFF));
  out.push_back(uint8_t((v >> 24) & 0xFF));
}

void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::vector<uint8_t>& bytes;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > bytes.size())
      throw std::runtime_error("truncated checkpoint");
  }
  uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = uint32_t(bytes[pos]) | uint32_t(bytes[pos + 1]) << 8 |
                 uint32_t(bytes[pos + 2]) << 16 |
                 uint32_t(bytes[pos + 3]) << 24;
    pos += 4;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
  bool done() const { return pos == bytes.size(); }
};

}  // namespace

std::vector<std::string> split_tokens(const std::string& joined) {
  std::vector<std::string> out;
  std::istringstream is(joined);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Vocab Checkpoint::vocab_from_config(const std::string& key) const {
  return Vocab::from_tokens(split_tokens(config_value(key)));
}

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  std::vector<uint8_t> out;
  out.insert(out.end(), Checkpoint::kMagic, Checkpoint::kMagic + 5);
  out.push_back(ck.version);

  std::string block;
  for (const auto& [k, v] : ck.config) {
    block += k;
    block += '=';
    block += v;
    block += '\n';
  }
  put_u32(out, uint32_t(block.size()));
  out.insert(out.end(), block.begin(), block.end());

  for (const Checkpoint::ParamRecord& p : ck.params) {
    put_u32(out, uint32_t(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put_u32(out, uint32_t(p.shape.size()));
    for (int d : p.shape) put_u32(out, uint32_t(d));
    for (float v : p.values) put_f32(out, v);
  }
  return out;
}

Checkpoint parse_checkpoint(const std::vector<uint8_t>& bytes) {
  Reader r{bytes};
  std::string magic = r.str(5);
  if (std::memcmp(magic.data(), Checkpoint::kMagic, 5) != 0)
    throw std::runtime_error("not a checkpoint file (bad magic)");
  Checkpoint ck;
  ck.version = r.u8();
  if (ck.version != Checkpoint::kVersion)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(int(ck.version)));

  std::string block = r.str(r.u32());
  size_t pos = 0;
  while (pos < block.size()) {
    size_t nl = block.find('\n', pos);
    if (nl == std::string::npos) nl = block.size();
    std::string line = block.substr(pos, nl - pos);
    pos = nl + 1;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("malformed checkpoint config line: " + line);
    ck.config.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }

  while (!r.done()) {
    Checkpoint::ParamRecord p;
    p.name = r.str(r.u32());
    uint32_t rank = r.u32();
    int64_t count = 1;
    p.shape.resize(rank);
    for (uint32_t i = 0; i < rank; ++i) {
      p.shape[i] = int(r.u32());
      count *= p.shape[i];
    }
    p.values.resize(size_t(count));
    for (int64_t i = 0; i < count; ++i) p.values[size_t(i)] = r.f32();
    ck.params.push_back(std::move(p));
  }
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::vector<uint8_t> bytes = serialize_checkpoint(ck);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint to " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()),
           std::streamsize(bytes.size()));
  if (!os) throw std::runtime_error("short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint from " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                             std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace ctxmt
