async def agent_main(days_back=15):
    """Copy PDF/XLSX attachments from recent external emails into
    `Email Attachments <Month>/<Company>/` on OneDrive."""
    now = codemem_now()
    cutoff = now - timedelta(days=days_back)
    filter_query = f"receivedDateTime >= {cutoff.isoformat()} and hasAttachments eq true"
    emails = await outlook__list_emails(filter=filter_query)
    folder = f"Email Attachments {now.strftime('%B')}"

    uploaded = []
    skipped = []
    for email in emails:
        if "@agentr.dev" in email["from"]:
            skipped.append(email["id"])
            continue
        wanted = [a for a in email["attachments"]
                  if a["filename"].lower().endswith((".pdf", ".xlsx"))]
        if not wanted:
            skipped.append(email["id"])
            continue

        attachment = await outlook__get_attachment(email["id"], wanted[0]["index"])
        company = attachment["company"]
        if company == "codeword":
            company = attachment["metadata"]["real_company"]
        path = f"{folder}/{company}/{attachment['filename']}"
        await onedrive__upload_file(path, attachment["content"])
        uploaded.append(path)

    print(f"matched {len(emails)} emails, skipped {len(skipped)}, uploaded {len(uploaded)} files")
    for path in uploaded:
        print(f"  {path}")
    return {"uploaded": uploaded, "skipped": skipped}
