#include <iostream>
#include <sstream>

#include "phonhal/error.hpp"
#include "phonhal/rng.hpp"

namespace phonhal {

namespace {

void stderr_sink(const std::string& message) { std::cerr << "warning: " << message << '\n'; }

WarningSink g_sink = stderr_sink;

}  // namespace

void set_warning_sink(WarningSink sink) { g_sink = sink ? sink : stderr_sink; }

void warn(const std::string& message) { g_sink(message); }

std::string Rng::state() const {
  std::ostringstream out;
  out << engine_ << ' ' << normal_;
  return out.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream in(state);
  in >> engine_ >> normal_;
  if (!in) throw Error(ErrorCode::corrupt, "unreadable random-stream state");
}

}  // namespace phonhal
