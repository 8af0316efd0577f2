#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace watt {

// Prompt format strings with exactly one "{}" class-name slot.
class TemplateSet {
 public:
  // Throws if the list is empty, a template lacks the slot, or two templates
  // are equal.
  explicit TemplateSet(std::vector<std::string> templates);

  // The eight CLIP-style templates used throughout; index 0 is
  // "a photo of a {}".
  static TemplateSet defaults();

  std::size_t size() const { return templates_.size(); }
  const std::string& operator[](std::size_t i) const { return templates_.at(i); }
  const std::vector<std::string>& templates() const { return templates_; }

 private:
  std::vector<std::string> templates_;
};

std::string format_prompt(std::string_view tmpl, std::string_view class_name);
std::vector<std::string> class_prompts(std::string_view tmpl, const std::vector<std::string>& class_names);

}  // namespace watt
