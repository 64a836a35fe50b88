#include "gama/tokenizer.hpp"

namespace gama::tok {

std::vector<int> encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  return ids;
}

std::string decode(std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

}  // namespace gama::tok
